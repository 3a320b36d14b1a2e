"""Run the toy pipeline end to end: suites, dataset, training, benchmark.

Usage: python scripts/run_pipeline.py OUT_DIR [--n-train N] [--n-test N] [--epochs E]

Defaults match PipelineConfig, i.e. the acceptance-suite run.
"""
import argparse
import json
import logging

from gnnbab.pipeline import PipelineConfig, SuiteConfig, run_all
from gnnbab.learn import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--n-train", type=int, default=SuiteConfig.n_train)
    ap.add_argument("--n-test", type=int, default=SuiteConfig.n_test)
    ap.add_argument("--genprops-branches", type=int, default=SuiteConfig.genprops_branches)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    suite = SuiteConfig(n_train=args.n_train, n_test=args.n_test, seed=args.seed,
                        genprops_branches=args.genprops_branches)
    cfg = PipelineConfig(suite=suite,
                         train=TrainConfig(lr=args.lr, max_epochs=args.epochs, seed=args.seed),
                         seed=args.seed)
    out = run_all(args.out, cfg)
    print(json.dumps({k: out[k] for k in ("n_samples", "best_epoch", "timings", "summary")},
                     indent=1))


if __name__ == "__main__":
    main()
