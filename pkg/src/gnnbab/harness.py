"""Property generation, benchmarking and the command-line front end."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bab import verify
from .branching import make_strategy
from .gnn import GnnParams
from .learn import TrainConfig, gen_dataset, read_dataset, train, write_dataset
from .network import (encode_property, evaluate_batch, load_network, load_property,
                      random_network, save_network, save_property)

log = logging.getLogger(__name__)

RECORD_FIELDS = ["property_id", "method", "status", "time_s", "branches", "gnn_usage_ratio", "seed"]
CACTUS_FIELDS = ["method", "time_s", "frac_solved"]
SOLVED = ("verified", "falsified")
WALL_CLOCK_FIELDS = ("time_s",)


# --------------------------------------------------------------------------
# property generation

@dataclass
class EpsilonSearchResult:
    property_id: str
    image: int
    c: int
    c_prime: int
    epsilon: float
    status: str
    trace: list = field(default_factory=list)


def bisect_epsilon(net0, x0, c, c_prime, timeout=60.0, seed=0, resolution=1e-3, eps_max=0.5,
                   max_branches=None, clamp=True):
    """Largest eps (to ``resolution``) whose property the SR verifier does not falsify.

    Returns (eps, status at eps, trace of (eps, status, time)).
    """
    def probe(eps):
        problem = encode_property(net0, c, c_prime, x0, eps, clamp=clamp)
        v = verify(problem, make_strategy("sr"), timeout=timeout, seed=seed,
                   max_branches=max_branches)
        trace.append((float(eps), v.status, v.wall_time))
        return v.status

    trace = []
    lo, hi = 0.0, float(eps_max)
    lo_status = probe(lo)
    if lo_status == "falsified":
        return None, lo_status, trace
    hi_status = probe(hi)
    if hi_status != "falsified":
        return hi, hi_status, trace
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        st = probe(mid)
        if st == "falsified":
            hi = mid
        else:
            lo, lo_status = mid, st
    return lo, lo_status, trace


def cmd_genprops(model, images, count, timeout=60.0, seed=0, out_dir=".", labels=None,
                 resolution=1e-3, eps_max=0.5, max_branches=None, prefix="prop", clamp=True):
    """Write property files for ``count`` images; returns the search results."""
    net0 = load_network(model) if isinstance(model, str) else model
    images = np.asarray(images, dtype=float)
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    model_path = model if isinstance(model, str) else os.path.join(out_dir, "model.json")
    if not isinstance(model, str):
        save_network(net0, model_path)
    results = []
    preds = evaluate_batch(net0, images)
    for i, x0 in enumerate(images):
        if len(results) >= count:
            break
        c = int(np.argmax(preds[i]))
        if labels is not None and int(labels[i]) != c:
            log.info("image %d misclassified (label %d, predicted %d); skipped", i, labels[i], c)
            continue
        others = [k for k in range(net0.output_size) if k != c]
        c_prime = int(rng.choice(others))
        eps, status, trace = bisect_epsilon(net0, x0, c, c_prime, timeout, seed, resolution,
                                            eps_max, max_branches, clamp)
        if eps is None:
            log.info("image %d falsified at eps=0; skipped", i)
            continue
        pid = f"{prefix}{len(results):04d}"
        save_property(os.path.join(out_dir, f"{pid}.json"),
                      os.path.relpath(model_path, out_dir), x0, eps, c, c_prime,
                      clamp=clamp, property_id=pid, image=i)
        results.append(EpsilonSearchResult(pid, i, c, c_prime, eps, status, trace))
    with open(os.path.join(out_dir, "epsilon_search.jsonl"), "w") as fh:
        for r in results:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return results


def toy_suite(out_dir, n_props, seed=0, sizes=(5, 16, 16, 3), **kw):
    """Random network plus bisected properties on random inputs in [0,1]^n."""
    rng = np.random.default_rng(seed)
    net0 = random_network(list(sizes), rng)
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.json")
    save_network(net0, model_path)
    images = rng.uniform(0.0, 1.0, (4 * n_props, sizes[0]))
    return cmd_genprops(model_path, images, n_props, seed=seed, out_dir=out_dir, **kw)


def property_paths(path):
    """Property files from a file, a directory, a glob, or a list file."""
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.json")))
        return [f for f in files if not f.endswith("model.json") and _is_property(f)]
    if any(ch in path for ch in "*?["):
        return sorted(glob.glob(path))
    if path.endswith(".txt"):
        base = os.path.dirname(path)
        with open(path) as fh:
            return [os.path.join(base, ln.strip()) for ln in fh if ln.strip()]
    return [path]


def _is_property(f):
    with open(f) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError:
            return False
    return isinstance(d, dict) and "network" in d and "center" in d


def load_properties(path):
    return [load_property(p) for p in property_paths(path)]


# --------------------------------------------------------------------------
# benchmarking

def geometric_mean(xs, floor=None):
    xs = np.asarray(xs, dtype=float)
    if floor is not None:
        xs = np.maximum(xs, floor)
    if len(xs) == 0:
        return math.nan
    if np.any(xs <= 0):
        return 0.0
    return float(np.exp(np.mean(np.log(xs))))


def _run_cell(args):
    problem, method, timeout, seed, max_branches, checkpoint, threshold = args
    start = time.perf_counter()
    try:
        params = GnnParams.load(checkpoint) if method.startswith("gnn") else None
        strategy = make_strategy(method, params=params, threshold=threshold)
        v = verify(problem, strategy, timeout=timeout, seed=seed, max_branches=max_branches)
        return {"property_id": problem.property_id, "method": method, "status": v.status,
                "time_s": v.wall_time, "branches": v.branch_count,
                "gnn_usage_ratio": v.gnn_usage_ratio, "seed": seed}
    except Exception as exc:  # a crashing cell must not abort the sweep
        log.exception("cell %s/%s failed", problem.property_id, method)
        return {"property_id": problem.property_id, "method": method, "status": "error",
                "time_s": time.perf_counter() - start, "branches": 0,
                "gnn_usage_ratio": None, "seed": seed, "error": repr(exc)}


def run_bench(problems, methods, timeout=60.0, seed=0, workers=1, checkpoint=None,
              max_branches=None, threshold=0.2):
    cells = [(p, m, timeout, seed, max_branches, checkpoint, threshold)
             for p in problems for m in methods]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def cactus(records, methods, n_props):
    """Per method, sorted solve times with the fraction solved at each."""
    rows = []
    for m in methods:
        times = sorted(r["time_s"] for r in records if r["method"] == m and r["status"] in SOLVED)
        for i, t in enumerate(times, 1):
            rows.append({"method": m, "time_s": t, "frac_solved": i / n_props})
    return rows


def summarize(records, methods):
    """Means of time and branches over properties solved by every method."""
    by_prop = {}
    for r in records:
        by_prop.setdefault(r["property_id"], {})[r["method"]] = r
    common = sorted(pid for pid, d in by_prop.items()
                    if all(m in d and d[m]["status"] in SOLVED for m in methods))
    out = {"n_properties": len(by_prop), "n_common": len(common), "methods": {}}
    for m in methods:
        rs = [r for r in records if r["method"] == m]
        t = [by_prop[p][m]["time_s"] for p in common]
        b = [by_prop[p][m]["branches"] for p in common]
        ratios = [r["gnn_usage_ratio"] for r in rs if r["gnn_usage_ratio"] is not None]
        out["methods"][m] = {
            "solved": sum(r["status"] in SOLVED for r in rs),
            "timeouts": sum(r["status"] == "timeout" for r in rs),
            "errors": sum(r["status"] == "error" for r in rs),
            "mean_time": float(np.mean(t)) if t else math.nan,
            "geo_time": geometric_mean(t),
            "mean_branches": float(np.mean(b)) if b else math.nan,
            "geo_branches": geometric_mean(b, floor=1.0),
            "mean_gnn_usage": float(np.mean(ratios)) if ratios else None,
        }
    return out


def write_records(path, records, include_wall_clock=True):
    fields = [f for f in RECORD_FIELDS if include_wall_clock or f not in WALL_CLOCK_FIELDS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in fields})


def write_cactus(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CACTUS_FIELDS)
        w.writeheader()
        w.writerows(rows)


def cmd_bench(problems, methods, timeout=60.0, seed=0, out_dir=".", workers=1, checkpoint=None,
              max_branches=None, threshold=0.2):
    if not problems or not methods:
        raise ValueError("bench needs at least one property and one method")
    os.makedirs(out_dir, exist_ok=True)
    records = run_bench(problems, methods, timeout, seed, workers, checkpoint, max_branches,
                        threshold)
    write_records(os.path.join(out_dir, "records.csv"), records)
    write_cactus(os.path.join(out_dir, "cactus.csv"), cactus(records, methods, len(problems)))
    summary = summarize(records, methods)
    summary["workers"] = workers
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return records, summary


# --------------------------------------------------------------------------
# CLI

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-branches", type=int, default=None,
                   help="deterministic branch budget; exceeding it reports timeout")


def build_parser():
    ap = argparse.ArgumentParser(prog="gnnbab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genprops", help="bisect epsilon to create properties")
    _common(g)
    g.add_argument("--model", help="network JSON; a random toy network when omitted")
    g.add_argument("--images", help=".npy or JSON array of inputs (optional labels via --labels)")
    g.add_argument("--labels", help=".npy or JSON array of true labels")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--resolution", type=float, default=1e-3)
    g.add_argument("--eps-max", type=float, default=0.5)
    g.add_argument("--sizes", default="5,16,16,3", help="toy network layer sizes")

    d = sub.add_parser("gendata", help="generate strong-branching training samples")
    _common(d)
    d.add_argument("--props", required=True)
    d.add_argument("--B", type=int, default=20)
    d.add_argument("--q", type=int, default=10)
    d.add_argument("--full-fraction", type=float, default=0.25)
    d.add_argument("--top-k", type=int, default=30)
    d.add_argument("--coverage", type=float, default=0.05)

    t = sub.add_parser("train", help="train the GNN on a dataset")
    _common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", default=None)
    t.add_argument("--checkpoint", required=True, help="output checkpoint path")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=2)
    t.add_argument("--max-epochs", type=int, default=200)
    t.add_argument("--p", type=int, default=64)
    t.add_argument("--T", type=int, default=2)

    v = sub.add_parser("verify", help="verify properties with one strategy")
    _common(v)
    v.add_argument("--props", required=True)
    v.add_argument("--strategy", choices=["random", "sr", "strong", "gnn", "gnn-online"],
                   default="sr")
    v.add_argument("--checkpoint", default=None)
    v.add_argument("--failsafe-threshold", type=float, default=0.2)

    b = sub.add_parser("bench", help="benchmark several strategies")
    _common(b)
    b.add_argument("--props", required=True)
    b.add_argument("--strategy", "--methods", dest="methods", default="random,sr,gnn",
                   help="comma-separated strategies")
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--failsafe-threshold", type=float, default=0.2)
    return ap


def _load_array(path):
    if path is None:
        return None
    if path.endswith(".npy"):
        return np.load(path)
    with open(path) as fh:
        return np.asarray(json.load(fh))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    provenance = {k: v for k, v in vars(args).items()}
    if args.command == "genprops":
        out = args.out or "props"
        os.makedirs(out, exist_ok=True)
        rng = np.random.default_rng(args.seed)
        if args.model:
            model = args.model
            n_in = load_network(model).input_size
        else:
            sizes = [int(s) for s in args.sizes.split(",")]
            model = os.path.join(out, "model.json")
            save_network(random_network(sizes, rng), model)
            n_in = sizes[0]
        images = _load_array(args.images)
        if images is None:
            images = rng.uniform(0.0, 1.0, (4 * args.count, n_in))
        res = cmd_genprops(model, images, args.count, args.timeout, args.seed, out,
                           labels=_load_array(args.labels), resolution=args.resolution,
                           eps_max=args.eps_max, max_branches=args.max_branches)
        for r in res:
            print(json.dumps({"property_id": r.property_id, "epsilon": r.epsilon,
                              "status": r.status}))
    elif args.command == "gendata":
        problems = load_properties(args.props)
        samples = gen_dataset(problems, B=args.B, q=args.q, full_fraction=args.full_fraction,
                              seed=args.seed, top_k=args.top_k, coverage=args.coverage)
        out = args.out or "dataset.jsonl"
        write_dataset(out, samples, {"provenance": provenance, "M": 10})
        print(json.dumps({"samples": len(samples), "out": out}))
    elif args.command == "train":
        _, samples = read_dataset(args.data)
        val = read_dataset(args.val_data)[1] if args.val_data else None
        cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                          max_epochs=args.max_epochs, p=args.p, T=args.T, seed=args.seed)
        log_path = args.out or os.path.splitext(args.checkpoint)[0] + "_log.csv"
        res = train(samples, cfg, val_samples=val, log_path=log_path)
        res.params.save(args.checkpoint)
        with open(os.path.splitext(args.checkpoint)[0] + "_meta.json", "w") as fh:
            json.dump({"provenance": provenance, "best_epoch": res.best_epoch,
                       "best_val_loss": res.best_val_loss, "aborted": res.aborted}, fh,
                      indent=2, sort_keys=True)
        print(json.dumps({"checkpoint": args.checkpoint, "best_epoch": res.best_epoch,
                          "best_val_loss": res.best_val_loss, "log": log_path}))
    elif args.command == "verify":
        params = GnnParams.load(args.checkpoint) if args.strategy.startswith("gnn") else None
        for problem in load_properties(args.props):
            strategy = make_strategy(args.strategy, params=params,
                                     threshold=args.failsafe_threshold)
            v = verify(problem, strategy, timeout=args.timeout, seed=args.seed,
                       max_branches=args.max_branches)
            print(v.to_json())
            if args.out:
                v.append_to(args.out)
    elif args.command == "bench":
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        problems = load_properties(args.props)
        out = args.out or "bench"
        _, summary = cmd_bench(problems, methods, args.timeout, args.seed, out,
                               args.workers, args.checkpoint, args.max_branches,
                               args.failsafe_threshold)
        summary["provenance"] = provenance
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
