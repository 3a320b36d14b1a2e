import numpy as np

from gnnbab.bab import root_domain
from gnnbab.network import encode_property, evaluate_batch, random_network

from oracles import dense_weights, exhaustive_minimum, interval_oracle


def toy_problem(rng, sizes=(4, 8, 8, 3), eps=0.15, clamp=False):
    net0 = random_network(list(sizes), rng)
    x0 = rng.uniform(0.0, 1.0, sizes[0])
    c = int(np.argmax(evaluate_batch(net0, x0[None])[0]))
    return encode_property(net0, c, (c + 1) % sizes[-1], x0, eps, clamp=clamp)


def n_interval_ambiguous(problem):
    lo, hi = interval_oracle(dense_weights(problem.network), problem.box.lower, problem.box.upper)
    return sum(int(np.sum((l < 0) & (u > 0))) for l, u in zip(lo[:-1], hi[:-1]))


def oracle_problems(rng, n, max_amb=12, min_amb=1, margin=1e-5, sizes=(4, 8, 8, 3)):
    """Problems with a bounded number of ambiguous ReLUs and a clear oracle verdict."""
    out = []
    while len(out) < n:
        eps = rng.uniform(0.05, 0.4)
        p = toy_problem(rng, sizes, eps)
        a = n_interval_ambiguous(p)
        if not min_amb <= a <= max_amb:
            continue
        best, arg, _ = exhaustive_minimum(dense_weights(p.network), p.box.lower, p.box.upper)
        if abs(best) < margin:
            continue
        out.append((p, best, arg))
    return out


def branching_domains(rng, n, min_amb=3, sizes=(4, 10, 10, 3)):
    """Root subdomains with a negative lower bound and some ambiguous ReLUs."""
    out = []
    while len(out) < n:
        p = toy_problem(rng, sizes, rng.uniform(0.1, 0.4))
        d = root_domain(p)
        if d.feasible and d.lb < -1e-3 and d.bounds.n_ambiguous() >= min_amb:
            out.append((p, d))
    return out
