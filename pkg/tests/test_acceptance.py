"""Acceptance suite: one test per criterion.

Each test records a pass/fail line (see conftest.py) before asserting, so the
terminal summary lists every criterion even when some fail. Criteria 6, 7, 8
and 11 share one run of the toy pipeline; criterion 11 repeats it.
"""
import csv

import numpy as np
import pytest
from scipy.optimize import linprog

from gnnbab import gnn
from gnnbab.bab import BranchDecision, improvement, split_relu, verify
from gnnbab.bounds import interval_bounds
from gnnbab.branching import (FailedDecisionRecord, GnnStrategy, RandomStrategy, SrStrategy,
                              sr_choice, strong_branch)
from gnnbab.gnn import FeatureNorm, GnnParams, extract_features, loss_gradient, score_nodes
from gnnbab.harness import geometric_mean, load_properties
from gnnbab.learn import accuracy, assign_labels, online_update, read_dataset, split_by_property
from gnnbab.lp import EQ, GE, LE, LpProblem, simplex_solve
from gnnbab.pipeline import PipelineConfig, run_all

from acceptance_log import record
from helpers import branching_domains, oracle_problems
from oracles import dense_weights, planet_oracle, vertex_lp

pytestmark = pytest.mark.slow

SOLVED = ("verified", "falsified")


# --------------------------------------------------------------------------
# shared runs

def oracle_suite(path, on_domain=None):
    """Criterion 1 run: 100 oracle problems, each verified with sr and random."""
    rng = np.random.default_rng(2024)
    rows = []
    for i, (p, best, _) in enumerate(oracle_problems(rng, 100)):
        expected = "falsified" if best < 0 else "verified"
        cb = None if on_domain is None else (lambda d, p=p: on_domain(p, d))
        for strat in (SrStrategy(), RandomStrategy()):
            v = verify(p, strat, timeout=120, seed=i, callback=cb)
            rows.append({"problem": i, "strategy": strat.name, "oracle_min": f"{best:.9e}",
                         "expected": expected, "status": v.status, "branches": v.branch_count})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


@pytest.fixture(scope="module")
def ordering_log():
    return {"checked": 0, "worst": 0.0, "bad": []}


@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory, ordering_log):
    log = ordering_log

    def check(p, d):
        # Planet lb >= linear-bounds lb >= interval lb on every admitted domain
        if d.bounds.is_empty():
            return
        itv = float(interval_bounds(p.network, p.box, d.decisions).lower[-1][0])
        lin = float(d.bounds.lower[-1][0])
        gaps = [lin - d.lb, itv - lin]
        log["checked"] += 1
        log["worst"] = max(log["worst"], *gaps)
        if max(gaps) > 1e-7:
            log["bad"].append((d.lb, lin, itv))

    path = tmp_path_factory.mktemp("crit1") / "oracle_verdicts.csv"
    return path, oracle_suite(path, check)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    res = run_all(str(out), PipelineConfig())
    return out, res


# --------------------------------------------------------------------------
# 1-2: soundness and relaxation ordering

def test_criterion_1_oracle_equivalence(oracle_run):
    _, rows = oracle_run
    wrong = [r for r in rows if r["status"] != r["expected"]]
    ok = record(1, not wrong and len(rows) == 200,
                f"{len(rows) - len(wrong)}/{len(rows)} verdicts match the exhaustive oracle "
                f"(100 problems x sr, random)")
    assert ok, wrong[:5]


def test_criterion_2_relaxation_ordering(oracle_run, ordering_log):
    log = ordering_log
    ok = record(2, not log["bad"] and log["checked"] > 0,
                f"{log['checked']} domains, max violation {log['worst']:.2e} (tol 1e-7)")
    assert ok, log["bad"][:5]


# --------------------------------------------------------------------------
# 3: LP solver

def _random_lp(rng, n, m):
    A = rng.normal(size=(m, n)).round(2)
    x_feas = rng.uniform(-1, 1, n)
    rel = rng.choice([LE, GE, EQ], size=m, p=[0.45, 0.45, 0.1])
    slack = rng.uniform(0, 1, m)
    b = A @ x_feas + np.where(rel == LE, slack, np.where(rel == GE, -slack, 0.0))
    return LpProblem(rng.normal(size=n), A, rel, b, np.full(n, -2.0), np.full(n, 2.0))


def test_criterion_3_lp_correctness():
    rng = np.random.default_rng(3)
    worst_obj = worst_cs = 0.0
    for _ in range(200):
        # vertex enumeration is exponential, so the oracle LPs stay small
        n = int(rng.integers(2, 7))
        p = _random_lp(rng, n, int(rng.integers(1, min(n, 5) + 1)))
        sol = simplex_solve(p)
        ref = vertex_lp(p.c, p.A, p.rel, p.b, p.lo, p.hi)
        assert sol.status == "optimal" and ref is not None
        worst_obj = max(worst_obj, abs(sol.objective - ref))
        worst_cs = max(worst_cs, sol.complementary_slackness_residual(p))
    # larger LPs up to 50 variables, checked against HiGHS
    worst_big = 0.0
    for _ in range(50):
        n = int(rng.integers(10, 51))
        p = _random_lp(rng, n, int(rng.integers(1, n // 2)))
        sol = simplex_solve(p)
        ub = p.rel == LE
        lbr = p.rel == GE
        eq = p.rel == EQ
        ref = linprog(p.c, A_ub=np.vstack([p.A[ub], -p.A[lbr]]),
                      b_ub=np.concatenate([p.b[ub], -p.b[lbr]]),
                      A_eq=p.A[eq] if eq.any() else None, b_eq=p.b[eq] if eq.any() else None,
                      bounds=list(zip(p.lo, p.hi)), method="highs")
        worst_big = max(worst_big, abs(sol.objective - ref.fun))
        worst_cs = max(worst_cs, sol.complementary_slackness_residual(p))
    ok = record(3, worst_obj <= 1e-7 and worst_big <= 1e-7 and worst_cs < 1e-6,
                f"200 LPs vs vertex enumeration: max |dobj| {worst_obj:.1e}; 50 LPs (<=50 vars) "
                f"vs HiGHS: {worst_big:.1e}; max CS residual {worst_cs:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 4: improvement metric

def test_criterion_4_improvement_metric():
    hand = [improvement(-4, -4, -4), improvement(-4, 0, 3), improvement(-4, -2, -1)]
    hand_ok = np.allclose(hand, [0.0, 1.0, 0.625], atol=1e-12)
    rng = np.random.default_rng(4)
    ms = []
    while len(ms) < 1000:
        for p, d in branching_domains(rng, 10):
            for dec in d.candidates()[:8]:
                kids = split_relu(p, d, dec)
                ms.append(improvement(d.lb, kids[0].lb, kids[1].lb))
    ms = np.array(ms[:1000])
    in_range = bool(np.all((ms >= 0) & (ms <= 1)))
    ok = record(4, hand_ok and in_range,
                f"hand cases {hand}; 1000 real splits in [{ms.min():.3f}, {ms.max():.3f}]")
    assert ok


# --------------------------------------------------------------------------
# 5: gradient check

def test_criterion_5_gradient_check():
    rng = np.random.default_rng(5)
    h = 1e-4
    errors, groups, kinks = [], set(), 0
    doms = branching_domains(rng, 5)
    params = GnnParams.init(64, 2, 5)
    for k, v in params.arrays.items():
        if ".b" in k:
            # non-zero biases move pre-activations off the ReLU kinks
            params.arrays[k] = rng.normal(0.0, 0.1, v.shape)
    params.norm = FeatureNorm.fit([extract_features(d, p.network) for p, d in doms])
    names_by_group = {}
    for name in params.names:
        names_by_group.setdefault(params.group_of(name), []).append(name)
    for p, d in doms:
        feats = extract_features(d, p.network)
        labels = strong_branch(p, d, keep_children=False)
        nodes = [l.decision.as_tuple() for l in labels]
        y = assign_labels(labels, 10)
        grads = loss_gradient(feats, p.network, params, nodes, y)

        def loss():
            return gnn.loss_and_gradient(feats, p.network, params, nodes, y)[0]

        L0 = loss()
        for g, names in sorted(names_by_group.items()):
            taken = 0
            while taken < 2:
                name = names[int(rng.integers(len(names)))]
                arr = params.arrays[name]
                idx = tuple(int(rng.integers(s)) for s in arr.shape)
                old = arr[idx]
                arr[idx] = old + h
                up = loss()
                arr[idx] = old - h
                down = loss()
                arr[idx] = old
                fwd, bwd = (up - L0) / h, (L0 - down) / h
                if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-6):
                    # the +-h step crosses a ReLU or hinge kink; draw another parameter
                    kinks += 1
                    continue
                fd = (up - down) / (2 * h)
                an = grads[name][idx]
                errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
                groups.add(g)
                taken += 1
    worst = max(errors)
    ok = record(5, len(errors) >= 50 and worst < 1e-3 and len(groups) == 6
                and kinks <= 0.1 * len(errors),
                f"{len(errors)} params over {len(groups)} groups, p=64: max rel err {worst:.1e} "
                f"({kinks} kink-straddling draws replaced)")
    assert ok


# --------------------------------------------------------------------------
# 6-8: pipeline based

def test_criterion_6_imitation_quality(pipeline):
    out, res = pipeline
    header, samples = read_dataset(out / "dataset.jsonl")
    n_props = len({s.property_id for s in samples})
    params = GnnParams.load(out / "gnn.json")
    _, va = split_by_property(samples, PipelineConfig().train.val_fraction,
                              PipelineConfig().train.seed)
    rel, ab = accuracy(va, params)
    curve = [round(r["val_acc_rel"], 3) for r in res["history"]]
    ok = record(6, len(samples) >= 2000 and n_props >= 50 and rel >= 0.7,
                f"{len(samples)} samples from {n_props} properties; best-checkpoint val acc "
                f"rel {rel:.3f} abs {ab:.3f} (epoch {res['best_epoch']}); curve in train_log.csv")
    print("val_acc_rel curve:", curve)
    assert (out / "train_log.csv").exists()
    assert ok


def _common_solved(records, n=50):
    by = {}
    for r in records:
        by.setdefault(r["property_id"], {})[r["method"]] = r
    methods = {r["method"] for r in records}
    ids = [pid for pid, cells in by.items()
           if set(cells) == methods and all(c["status"] in SOLVED for c in cells.values())]
    return [by[pid] for pid in ids[:n]]


def _records(out):
    with open(out / "bench" / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["branches"] = int(r["branches"])
    return rows


def test_criterion_7_branching_effectiveness(pipeline):
    out, _ = pipeline
    cells = _common_solved(_records(out))
    br = {m: np.array([c[m]["branches"] for c in cells], dtype=float)
          for m in ("random", "sr", "gnn")}
    if cells:
        means = {m: float(v.mean()) for m, v in br.items()}
        lower = float(np.mean(br["gnn"] < br["sr"]))
    else:
        means, lower = {m: float("nan") for m in br}, 0.0
    gmeans = {m: geometric_mean(v, floor=1.0) for m, v in br.items()}
    ok = (len(cells) == 50 and means["gnn"] <= means["sr"] and lower >= 0.6
          and means["random"] > max(means["sr"], means["gnn"]))
    record(7, ok, f"{len(cells)} common props; mean branches " +
           ", ".join(f"{m} {means[m]:.1f}/{gmeans[m]:.1f}" for m in br) +
           f" (arith/geo); gnn < sr on {lower:.0%}")
    assert ok


def test_criterion_8_failsafe_accounting(pipeline):
    out, _ = pipeline
    cells = _common_solved(_records(out))
    usage = np.array([float(c["gnn"]["gnn_usage_ratio"]) for c in cells])
    cfg = PipelineConfig()
    params = GnnParams.load(out / "gnn.json")
    ids = {c["gnn"]["property_id"] for c in cells}
    problems = [p for p in load_properties(str(out / "props" / "test")) if p.property_id in ids]
    violations, n_choices, same = 0, 0, 0
    for p in problems:
        strat = GnnStrategy(params, cfg.threshold)
        v = verify(p, strat, timeout=cfg.bench_timeout, seed=cfg.seed,
                   max_branches=cfg.bench_branches)
        rec = next(c["gnn"] for c in cells if c["gnn"]["property_id"] == p.property_id)
        same += v.branch_count == rec["branches"]
        for res in strat.choices:
            n_choices += 1
            measured = [res.m_gnn] + ([res.m_h] if res.m_h is not None else [])
            if res.m < min(measured) or (res.m_h is not None and res.m != max(measured)):
                violations += 1
    ok = record(8, len(usage) > 0 and usage.mean() >= 0.8 and violations == 0,
                f"mean gnn_usage_ratio {usage.mean():.3f} over {len(usage)} props; "
                f"{violations} fail-safe violations in {n_choices} decisions")
    assert same == len(problems)
    assert ok


# --------------------------------------------------------------------------
# 9: strong branching optimality

def test_criterion_9_strong_branching_optimality():
    rng = np.random.default_rng(9)
    doms = branching_domains(rng, 40)
    # a few deeper domains as well
    for p, d in branching_domains(rng, 20):
        kid = min(split_relu(p, d, sr_choice(d, p.network)), key=lambda k: k.lb)
        if kid.feasible and kid.lb < 0 and kid.has_ambiguous():
            doms.append((p, kid))
    doms = doms[:50]
    worst = 0.0
    for p, d in doms:
        labels = strong_branch(p, d, keep_children=False)
        wb = dense_weights(p.network)
        ms = {}
        for c in d.candidates():
            lbs = []
            for phase_child in split_relu(p, d, c):
                b = phase_child.bounds
                if b.is_empty():
                    lbs.append(np.inf)
                    continue
                lbs.append(planet_oracle(wb, p.box.lower, p.box.upper, b.lower[:-1],
                                         b.upper[:-1]))
            gain = sum(min(lb, 0.0) for lb in lbs) - 2 * d.lb
            ms[c] = min(max(gain / (-2 * d.lb), 0.0), 1.0)
        worst = max(worst, max(ms.values()) - ms[labels[0].decision],
                    abs(labels[0].m - max(ms.values())))
    ok = record(9, len(doms) == 50 and worst <= 1e-6,
                f"{len(doms)} domains, top decision vs independent max m: {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 10: online learning

def test_criterion_10_online_descent():
    rng = np.random.default_rng(10)
    doms = branching_domains(rng, 20)
    params = GnnParams.init(64, 2, 10)
    for k, v in params.arrays.items():
        if ".b" in k:
            params.arrays[k] = rng.normal(0.0, 0.1, v.shape)
    params.norm = FeatureNorm.fit([extract_features(d, p.network) for p, d in doms])
    gains = []
    for p, d in doms:
        feats = extract_features(d, p.network)
        nodes, scores = gnn.infer(feats, p.network, params)
        order = np.argsort(-np.asarray(scores), kind="stable")
        v_gnn = nodes[order[0]]
        v_h = nodes[order[int(rng.integers(1, len(nodes)))]]
        rec = FailedDecisionRecord("synthetic", BranchDecision(*v_gnn), BranchDecision(*v_h),
                                   0.05, 0.5, occurrence=2)
        before = score_nodes(feats, p.network, params, [v_h, v_gnn])
        new = online_update(params, rec, d, p.network, lr=1e-4)
        after = score_nodes(feats, p.network, new, [v_h, v_gnn])
        gains.append((after[0] - after[1]) - (before[0] - before[1]))
    gains = np.array(gains)
    ok = record(10, len(gains) == 20 and np.all(gains > 0),
                f"20 synthesized failures; gap increase min {gains.min():.2e} "
                f"median {np.median(gains):.2e}")
    assert ok


# --------------------------------------------------------------------------
# 11: determinism

def test_criterion_11_determinism(oracle_run, pipeline, tmp_path):
    path1, _ = oracle_run
    oracle_suite(tmp_path / "oracle_verdicts.csv")
    out1, _ = pipeline
    out2 = tmp_path / "pipeline"
    run_all(str(out2), PipelineConfig())
    pairs = {"criterion 1 verdicts": (path1, tmp_path / "oracle_verdicts.csv"),
             "criterion 6 dataset": (out1 / "dataset.jsonl", out2 / "dataset.jsonl"),
             "criterion 6 train log": (out1 / "train_log.csv", out2 / "train_log.csv"),
             "criterion 7 records": (out1 / "bench" / "records_nowall.csv",
                                     out2 / "bench" / "records_nowall.csv")}
    diff = [k for k, (a, b) in pairs.items() if a.read_bytes() != b.read_bytes()]
    ok = record(11, not diff, "identical: " + ", ".join(k for k in pairs if k not in diff) +
                (f"; differ: {', '.join(diff)}" if diff else ""))
    assert ok, diff
