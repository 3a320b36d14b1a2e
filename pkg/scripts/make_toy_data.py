"""Regenerate the small toy suite and dataset shipped under data/toy.

Usage: python scripts/make_toy_data.py [--out data/toy]
"""
import argparse
import json
import os

from gnnbab.harness import load_properties, toy_suite
from gnnbab.learn import gen_dataset, write_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join("data", "toy"))
    ap.add_argument("--n-props", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    props = os.path.join(args.out, "props")
    toy_suite(props, args.n_props, seed=args.seed, sizes=(5, 12, 12, 3), timeout=60,
              resolution=5e-3, eps_max=1.0, max_branches=100, clamp=False)
    samples = gen_dataset(load_properties(props), B=8, q=4, full_fraction=0.0, seed=args.seed)
    path = os.path.join(args.out, "dataset.jsonl")
    write_dataset(path, samples, {"M": 10, "B": 8, "q": 4, "full_fraction": 0.0,
                                  "seed": args.seed})
    print(json.dumps({"properties": args.n_props, "samples": len(samples), "dataset": path}))


if __name__ == "__main__":
    main()
