"""End-to-end toy experiment: property suites, dataset, training, benchmark."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .harness import (cactus, cmd_genprops, load_properties, run_bench, summarize, write_cactus,
                      write_records)
from .learn import TrainConfig, gen_dataset, read_dataset, train, write_dataset
from .network import random_network, save_network

log = logging.getLogger(__name__)


@dataclass
class SuiteConfig:
    sizes: tuple = (5, 16, 16, 3)
    net_seed: int = 0
    n_train: int = 240
    n_test: int = 120
    genprops_branches: int = 200
    resolution: float = 1e-3
    eps_max: float = 1.0
    clamp: bool = False
    seed: int = 0


@dataclass
class PipelineConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    B: int = 20
    q: int = 10
    full_fraction: float = 0.25
    top_k: int = 30
    coverage: float = 0.05
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, max_epochs=40))
    methods: tuple = ("random", "sr", "gnn")
    bench_timeout: float = 60.0
    bench_branches: int = 5000
    threshold: float = 0.2
    seed: int = 0


def build_suites(out_dir, cfg):
    """One random network; disjoint train and test properties on fresh inputs."""
    rng = np.random.default_rng(cfg.net_seed)
    net0 = random_network(list(cfg.sizes), rng)
    os.makedirs(out_dir, exist_ok=True)
    model = os.path.join(out_dir, "model.json")
    save_network(net0, model)
    images = rng.uniform(0.0, 1.0, (4 * (cfg.n_train + cfg.n_test), cfg.sizes[0]))
    half = len(images) // 2
    common = dict(timeout=math.inf, seed=cfg.seed, resolution=cfg.resolution,
                  eps_max=cfg.eps_max, max_branches=cfg.genprops_branches, clamp=cfg.clamp)
    train_dir, test_dir = os.path.join(out_dir, "train"), os.path.join(out_dir, "test")
    cmd_genprops(model, images[:half], cfg.n_train, out_dir=train_dir, prefix="train", **common)
    cmd_genprops(model, images[half:], cfg.n_test, out_dir=test_dir, prefix="test", **common)
    return train_dir, test_dir


def run_dataset(props_dir, path, cfg):
    problems = load_properties(props_dir)
    samples = gen_dataset(problems, B=cfg.B, q=cfg.q, full_fraction=cfg.full_fraction,
                          seed=cfg.seed, top_k=cfg.top_k, coverage=cfg.coverage)
    write_dataset(path, samples, {"M": cfg.train.M, "B": cfg.B, "q": cfg.q,
                                  "full_fraction": cfg.full_fraction, "seed": cfg.seed,
                                  "n_properties": len(problems)})
    return samples


def run_training(dataset_path, checkpoint, log_path, cfg):
    _, samples = read_dataset(dataset_path)
    res = train(samples, cfg.train, log_path=log_path)
    res.params.save(checkpoint)
    return res, samples


def run_benchmark(props_dir, checkpoint, out_dir, cfg):
    problems = load_properties(props_dir)
    records = run_bench(problems, list(cfg.methods), cfg.bench_timeout, cfg.seed, 1, checkpoint,
                        cfg.bench_branches, cfg.threshold)
    os.makedirs(out_dir, exist_ok=True)
    write_records(os.path.join(out_dir, "records.csv"), records)
    write_records(os.path.join(out_dir, "records_nowall.csv"), records, include_wall_clock=False)
    write_cactus(os.path.join(out_dir, "cactus.csv"), cactus(records, cfg.methods, len(problems)))
    summary = summarize(records, list(cfg.methods))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return records, summary


def run_all(out_dir, cfg=None):
    """Full pipeline; returns a dict of artefact paths and headline numbers."""
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    train_dir, test_dir = build_suites(os.path.join(out_dir, "props"), cfg.suite)
    t1 = time.perf_counter()
    ds = os.path.join(out_dir, "dataset.jsonl")
    samples = run_dataset(train_dir, ds, cfg)
    t2 = time.perf_counter()
    ck = os.path.join(out_dir, "gnn.json")
    res, _ = run_training(ds, ck, os.path.join(out_dir, "train_log.csv"), cfg)
    t3 = time.perf_counter()
    records, summary = run_benchmark(test_dir, ck, os.path.join(out_dir, "bench"), cfg)
    t4 = time.perf_counter()
    out = {"n_samples": len(samples), "best_epoch": res.best_epoch,
           "best_val_loss": res.best_val_loss, "history": res.history, "summary": summary,
           "timings": {"genprops": t1 - t0, "gendata": t2 - t1, "train": t3 - t2,
                       "bench": t4 - t3},
           "config": asdict(cfg)}
    with open(os.path.join(out_dir, "pipeline.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=str)
    return out
