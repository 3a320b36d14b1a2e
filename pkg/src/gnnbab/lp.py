"""Planet-relaxation LP and a dense bounded-variable simplex solver.

Sign convention for reported row duals (minimisation): duals of ``<=`` and
``>=`` rows are both non-negative, equality duals are free. For ``>=`` and
``=`` rows the dual equals d(objective)/d(rhs); for ``<=`` rows it is the
negation. Reduced costs are reported for the structural variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .bounds import BLOCKED, PASSING, relaxation
from .network import evaluate

LE, EQ, GE = -1, 0, 1

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-7
COST_TOL = 1e-9
TINY_PIVOT = 1e-11


class NumericalError(RuntimeError):
    pass


class InfeasibleDomain(ValueError):
    """Decision and bounds are contradictory; the domain is empty."""


@dataclass
class LpProblem:
    c: np.ndarray
    A: np.ndarray
    rel: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    index: dict = field(default_factory=dict)

    @property
    def n_vars(self):
        return self.c.shape[0]

    @property
    def n_rows(self):
        return self.b.shape[0]

    def to_text(self):
        """Plain-text dump (CPLEX-LP flavoured) for cross-checking."""
        name = lambda j: f"v{j}"
        terms = lambda row: " ".join(f"{'+' if a >= 0 else '-'} {abs(a):.17g} {name(j)}"
                                     for j, a in enumerate(row) if a != 0) or "0 v0"
        out = ["Minimize", " obj: " + terms(self.c), "Subject To"]
        ops = {LE: "<=", EQ: "=", GE: ">="}
        for i in range(self.n_rows):
            out.append(f" r{i}: {terms(self.A[i])} {ops[int(self.rel[i])]} {self.b[i]:.17g}")
        out.append("Bounds")
        for j in range(self.n_vars):
            lo = "-inf" if np.isneginf(self.lo[j]) else f"{self.lo[j]:.17g}"
            hi = "+inf" if np.isposinf(self.hi[j]) else f"{self.hi[j]:.17g}"
            out.append(f" {lo} <= {name(j)} <= {hi}")
        out.append("End")
        return "\n".join(out)


@dataclass
class LpSolution:
    status: str
    objective: float
    primal: np.ndarray
    dual: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0
    pivots: list = field(default_factory=list)

    def feasibility_residual(self, p):
        if self.status != "optimal":
            return np.inf
        act = p.A @ self.primal - p.b
        viol = np.where(p.rel == LE, np.maximum(act, 0.0),
                        np.where(p.rel == GE, np.maximum(-act, 0.0), np.abs(act)))
        bnd = np.maximum(p.lo - self.primal, 0.0) + np.maximum(self.primal - p.hi, 0.0)
        return float(max(viol.max(initial=0.0), bnd.max(initial=0.0)))

    def complementary_slackness_residual(self, p):
        if self.status != "optimal":
            return np.inf
        act = p.A @ self.primal - p.b
        rows = np.abs(self.dual * act)
        x = self.primal
        dist = np.minimum(np.where(np.isfinite(p.lo), np.abs(x - p.lo), np.inf),
                          np.where(np.isfinite(p.hi), np.abs(x - p.hi), np.inf))
        dist = np.where(np.isinf(dist), 1.0, dist)
        cols = np.abs(self.reduced_costs) * dist
        return float(max(rows.max(initial=0.0), cols.max(initial=0.0)))


# ---------------------------------------------------------------------------
# simplex

_BASIC, _AT_LO, _AT_HI, _FREE = 0, 1, 2, 3


class SimplexSolver:
    """Two-phase primal simplex on a dense tableau with bounded variables.

    Entering variable by largest reduced cost; after a run of degenerate
    pivots it switches to Bland's smallest-index rule until progress resumes.
    One instance solves one problem at a time.
    """

    def __init__(self, max_iter=None, degenerate_limit=30):
        self.max_iter = max_iter
        self.degenerate_limit = degenerate_limit

    def solve(self, p):
        m, n = p.n_rows, p.n_vars
        ineq = np.flatnonzero(p.rel != EQ)
        ns = ineq.shape[0]
        # structural | slacks | artificials
        lo = np.concatenate([p.lo, np.zeros(ns)])
        hi = np.concatenate([p.hi, np.full(ns, np.inf)])
        A = np.zeros((m, n + ns))
        A[:, :n] = p.A
        A[ineq, n + np.arange(ns)] = np.where(p.rel[ineq] == LE, 1.0, -1.0)
        slack_of_row = np.full(m, -1)
        slack_of_row[ineq] = n + np.arange(ns)

        x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
        state = np.where(np.isfinite(lo), _AT_LO, np.where(np.isfinite(hi), _AT_HI, _FREE))
        resid = p.b - A @ x

        basis = np.empty(m, dtype=int)
        art_cols, art_sign = [], []
        scale = np.empty(m)
        for i in range(m):
            s = slack_of_row[i]
            coef = A[i, s] if s >= 0 else 0.0
            if s >= 0 and resid[i] * coef >= 0:
                basis[i] = s
                scale[i] = coef
            else:
                sign = 1.0 if resid[i] >= 0 else -1.0
                basis[i] = n + ns + len(art_cols)
                art_cols.append(i)
                art_sign.append(sign)
                scale[i] = sign
        na = len(art_cols)
        N = n + ns + na
        Afull = np.zeros((m, N))
        Afull[:, :n + ns] = A
        Afull[art_cols, n + ns + np.arange(na)] = art_sign
        lo = np.concatenate([lo, np.zeros(na)])
        hi = np.concatenate([hi, np.full(na, np.inf)])
        x = np.concatenate([x, np.zeros(na)])
        state = np.concatenate([state, np.zeros(na, dtype=int)])
        state[basis] = _BASIC
        x[basis] = 0.0

        T = Afull / scale[:, None]
        xB = resid / scale
        self._A, self._b = Afull, p.b
        self._T, self._xB, self._basis = T, xB, basis
        self._x, self._state, self._lo, self._hi = x, state, lo, hi
        self._pivots = []
        self._iters = 0
        self._tiny = 0
        max_iter = self.max_iter or 50 * (m + N) + 1000

        if na:
            c1 = np.zeros(N)
            c1[n + ns:] = 1.0
            status = self._run(c1, max_iter)
            if status == "unbounded":
                raise NumericalError("phase 1 reported unbounded")
            infeas = float(np.sum(self._values()[n + ns:]))
            if infeas > FEAS_TOL * max(1.0, np.abs(p.b).max(initial=0.0)):
                return LpSolution("infeasible", np.nan, np.full(n, np.nan),
                                  np.full(m, np.nan), np.full(n, np.nan),
                                  self._iters, self._pivots)
            # artificials are pinned at zero from here on
            self._hi[n + ns:] = 0.0
            nb_art = (self._state[n + ns:] != _BASIC)
            self._state[n + ns:][nb_art] = _AT_LO
            self._x[n + ns:][nb_art] = 0.0

        c2 = np.zeros(N)
        c2[:n] = p.c
        status = self._run(c2, max_iter)
        if status == "unbounded":
            return LpSolution("unbounded", -np.inf, np.full(n, np.nan), np.full(m, np.nan),
                              np.full(n, np.nan), self._iters, self._pivots)

        # refactor from the final basis for accurate primal and dual values
        B = self._A[:, self._basis]
        nonbasic = self._state != _BASIC
        rhs = self._b - self._A[:, nonbasic] @ self._x[nonbasic]
        try:
            xB = np.linalg.solve(B, rhs)
            ybar = np.linalg.solve(B.T, c2[self._basis])
        except np.linalg.LinAlgError as err:
            raise NumericalError("singular final basis") from err
        full = self._x.copy()
        full[self._basis] = xB
        primal = full[:n]
        reduced = p.c - p.A.T @ ybar
        dual = np.where(p.rel == LE, -ybar, ybar)
        sol = LpSolution("optimal", float(p.c @ primal), primal, dual, reduced,
                         self._iters, self._pivots)
        if sol.feasibility_residual(p) > 1e3 * FEAS_TOL:
            raise NumericalError(f"final primal residual {sol.feasibility_residual(p):.3g}")
        return sol

    def _values(self):
        v = self._x.copy()
        v[self._basis] = self._xB
        return v

    def _run(self, c, max_iter):
        log = np.empty((max_iter + 1, 2), dtype=np.int64)
        code, iters, n_log, tiny = _simplex_loop(
            self._T, self._xB, self._basis, self._x, self._state, self._lo, self._hi,
            c, max_iter - self._iters, self.degenerate_limit, log)
        self._iters += iters
        self._pivots.extend(map(tuple, log[:n_log].tolist()))
        if code == _CODE_LIMIT:
            raise NumericalError("simplex iteration limit reached")
        if code == _CODE_TINY:
            raise NumericalError("repeated pivots below magnitude threshold")
        return "optimal" if code == _CODE_OPTIMAL else "unbounded"


_CODE_OPTIMAL, _CODE_UNBOUNDED, _CODE_LIMIT, _CODE_TINY = 0, 1, 2, 3


@numba.njit(cache=True)
def _simplex_loop(T, xB, basis, x, state, lo, hi, c, max_iter, degenerate_limit, log):
    """Primal simplex iterations in place; returns (code, iterations, log length, tiny)."""
    m, N = T.shape
    d = c.copy()
    for j in range(N):
        s = 0.0
        for i in range(m):
            s += c[basis[i]] * T[i, j]
        d[j] = c[j] - s
    for i in range(m):
        d[basis[i]] = 0.0
    bland = False
    degenerate = 0
    n_log = 0
    tiny = 0
    it = 0
    skip = np.zeros(N, dtype=np.bool_)
    col = np.empty(m)
    while True:
        it += 1
        if it > max_iter:
            return 2, it, n_log, tiny
        if it % 50 == 0:
            for j in range(N):
                s = 0.0
                for i in range(m):
                    s += c[basis[i]] * T[i, j]
                d[j] = c[j] - s
            for i in range(m):
                d[basis[i]] = 0.0
        # pricing
        q = -1
        best = 0.0
        for j in range(N):
            if skip[j] or lo[j] == hi[j]:
                continue
            st = state[j]
            dj = d[j]
            if st == 1:
                ok = dj < -1e-9
            elif st == 2:
                ok = dj > 1e-9
            elif st == 3:
                ok = abs(dj) > 1e-9
            else:
                ok = False
            if not ok:
                continue
            if bland:
                q = j
                break
            if abs(dj) > best:
                best = abs(dj)
                q = j
        if q < 0:
            return 0, it, n_log, tiny
        direction = 1.0 if d[q] < 0 else -1.0
        any_big = False
        any_tiny = False
        for i in range(m):
            col[i] = T[i, q] * direction
            a = abs(col[i])
            if a > 1e-9:
                any_big = True
            elif a > 1e-11:
                any_tiny = True
        span = hi[q] - lo[q]
        if not any_big and any_tiny:
            tiny += 1
            if tiny > 100:
                return 3, it, n_log, tiny
            if np.isinf(span):
                skip[q] = True
                continue
        # ratio test
        t_best = np.inf
        row = -1
        for i in range(m):
            a = col[i]
            b = basis[i]
            if a > 1e-9:
                if np.isinf(lo[b]):
                    continue
                r = (xB[i] - lo[b]) / a
            elif a < -1e-9:
                if np.isinf(hi[b]):
                    continue
                r = (hi[b] - xB[i]) / -a
            else:
                continue
            if r < 0.0:
                r = 0.0
            if row < 0 or r < t_best - 1e-12:
                t_best = r
                row = i
            elif r <= t_best + 1e-12:
                if bland:
                    if basis[i] < basis[row]:
                        row = i
                        t_best = min(t_best, r)
                elif abs(a) > abs(col[row]):
                    row = i
                    t_best = min(t_best, r)
        if span <= t_best:
            if np.isinf(span):
                return 1, it, n_log, tiny
            for i in range(m):
                xB[i] -= span * col[i]
            if state[q] == 1:
                state[q] = 2
                x[q] = hi[q]
            else:
                state[q] = 1
                x[q] = lo[q]
            log[n_log, 0] = q
            log[n_log, 1] = -1
            n_log += 1
            degenerate = 0
            bland = False
            skip[:] = False
            continue
        if row < 0:
            return 1, it, n_log, tiny
        t = t_best
        if t < 1e-12:
            degenerate += 1
            if degenerate >= degenerate_limit:
                bland = True
        else:
            degenerate = 0
            bland = False
        leaving = basis[row]
        entering_value = x[q] + direction * t
        for i in range(m):
            xB[i] -= t * col[i]
        if col[row] > 0:
            state[leaving] = 1
            x[leaving] = lo[leaving]
        else:
            state[leaving] = 2
            x[leaving] = hi[leaving]
        piv = T[row, q]
        if abs(piv) < 1e-11:
            return 3, it, n_log, tiny
        inv = 1.0 / piv
        for j in range(N):
            T[row, j] *= inv
        for i in range(m):
            if i == row:
                continue
            f = T[i, q]
            if f != 0.0:
                for j in range(N):
                    T[i, j] -= f * T[row, j]
        dq = d[q]
        for j in range(N):
            d[j] -= dq * T[row, j]
        xB[row] = entering_value
        basis[row] = q
        state[q] = 0
        d[q] = 0.0
        skip[:] = False
        log[n_log, 0] = q
        log[n_log, 1] = leaving
        n_log += 1


def simplex_solve(p):
    return SimplexSolver().solve(p)


# ---------------------------------------------------------------------------
# Planet relaxation

def build_planet_lp(net, box, decisions, bounds):
    """Triangle-relaxation LP minimising the network output over the domain."""
    if bounds.is_empty():
        raise InfeasibleDomain("intermediate bounds are empty")
    L = net.depth
    n0 = net.input_size
    sizes = net.hidden_sizes
    # column layout: x0 | (pre_k, post_k) per hidden layer | output
    offsets = []
    col = n0
    for h in sizes:
        offsets.append((col, col + h))
        col += 2 * h
    out_col = col
    n = col + 1

    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    lo[:n0], hi[:n0] = box.lower, box.upper
    rows, rels, rhs = [], [], []
    relu_rows = []

    def add(block, rel, b):
        rows.append(block)
        rels.append(np.full(block.shape[0], rel))
        rhs.append(np.asarray(b, dtype=float))

    prev_cols = np.arange(n0)
    for k, layer in enumerate(net.layers):
        h = layer.out_size
        tgt = np.arange(out_col, out_col + 1) if k == L - 1 else offsets[k][0] + np.arange(h)
        block = np.zeros((h, n))
        block[np.arange(h), tgt] = 1.0
        block[:, prev_cols] = -layer.matrix
        add(block, EQ, layer.flat_bias)
        if k == L - 1:
            break
        pre = offsets[k][0] + np.arange(h)
        post = offsets[k][1] + np.arange(h)
        l, u = bounds.lower[k], bounds.upper[k]
        phases = decisions.phases[k]
        if np.any((phases == PASSING) & (u < 0)) or np.any((phases == BLOCKED) & (l > 0)):
            raise InfeasibleDomain(f"layer {k}: fixed phase contradicts bounds")
        lo[pre], hi[pre] = l, u
        alpha, beta = relaxation(l, u)
        amb = (l < 0) & (u > 0)
        passing = ~amb & (alpha == 1.0)
        blocked = ~amb & ~passing
        ia, ip, ib = np.flatnonzero(amb), np.flatnonzero(passing), np.flatnonzero(blocked)
        if ip.size:
            block = np.zeros((ip.size, n))
            block[np.arange(ip.size), post[ip]] = 1.0
            block[np.arange(ip.size), pre[ip]] = -1.0
            add(block, EQ, np.zeros(ip.size))
        if ib.size:
            block = np.zeros((ib.size, n))
            block[np.arange(ib.size), post[ib]] = 1.0
            add(block, EQ, np.zeros(ib.size))
        if ia.size:
            start = sum(r.shape[0] for r in rows)
            na = ia.size
            block = np.zeros((3 * na, n))
            r = np.arange(na)
            block[3 * r, post[ia]] = 1.0                       # x >= 0
            block[3 * r + 1, post[ia]] = 1.0                   # x - xhat >= 0
            block[3 * r + 1, pre[ia]] = -1.0
            block[3 * r + 2, post[ia]] = 1.0                   # x - a*xhat <= beta
            block[3 * r + 2, pre[ia]] = -alpha[ia]
            rows.append(block)
            rels.append(np.tile([GE, GE, LE], na))
            b = np.zeros(3 * na)
            b[3 * r + 2] = beta[ia]
            rhs.append(b)
            relu_rows.append((k, ia, start + 3 * r))
        prev_cols = post

    A = np.vstack(rows)
    c = np.zeros(n)
    c[out_col] = 1.0
    index = {"input": np.arange(n0), "layers": offsets, "output": out_col,
             "relu_rows": relu_rows}
    return LpProblem(c, A, np.concatenate(rels), np.concatenate(rhs), lo, hi, index)


@dataclass
class PlanetBound:
    """Output lower bound with the LP values attached to network nodes."""
    lb: float
    status: str
    x0: np.ndarray | None = None
    pre: list | None = None
    post: list | None = None
    output: float | None = None
    duals: list | None = None

    @property
    def feasible(self):
        return self.status == "optimal"


def output_lower_bound(net, box, decisions, bounds, solver=None):
    """Planet LP lower bound; infeasible domains report ``lb = +inf``."""
    try:
        p = build_planet_lp(net, box, decisions, bounds)
    except InfeasibleDomain:
        return PlanetBound(np.inf, "infeasible")
    sol = (solver or SimplexSolver()).solve(p)
    if sol.status == "infeasible":
        return PlanetBound(np.inf, "infeasible")
    if sol.status != "optimal":
        raise NumericalError(f"Planet LP status {sol.status}")
    x = sol.primal
    pre, post, duals = [], [], []
    for k, (a, b) in enumerate(p.index["layers"]):
        h = b - a
        pre.append(x[a:a + h].copy())
        post.append(x[b:b + h].copy())
        duals.append(np.zeros((h, 3)))
    for k, units, first in p.index["relu_rows"]:
        duals[k][units] = np.stack([sol.dual[first], sol.dual[first + 1], sol.dual[first + 2]],
                                   axis=1)
    return PlanetBound(sol.objective, "optimal", x[p.index["input"]].copy(), pre, post,
                       float(x[p.index["output"]]), duals)


def output_upper_bound(net, primal_input, box=None):
    """Network value at the LP's input point (clipped into the box)."""
    x = np.asarray(primal_input, dtype=float)
    if box is not None:
        x = box.clip(x)
    return evaluate(net, x)
