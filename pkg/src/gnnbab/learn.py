"""Training data generation, imitation training and online fine-tuning."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gnn
from .bab import BranchAndBound, BranchDecision, verify
from .branching import (FailedDecisionRecord, SrStrategy, StrongBranchLabel, candidate_subset,
                        sr_choice, sr_score, strong_branch)
from .network import network_from_dict

log = logging.getLogger(__name__)

DATASET_SCHEMA = 1
DUAL_CONVENTION = ("duals per ambiguous ReLU in row order (x>=0, x-xhat>=0, x-alpha*xhat<=beta); "
                   "non-negative on inequality rows of a minimisation")

__all__ = ["FailedDecisionRecord", "TrainingSample", "TrainConfig", "TrainResult", "Adam",
           "assign_labels", "gen_dataset", "train", "accuracy", "online_update",
           "write_dataset", "read_dataset", "split_by_property"]


# --------------------------------------------------------------------------
# samples

@dataclass
class TrainingSample:
    property_id: str
    network_key: str
    network: object
    decisions: list
    features: gnn.NodeFeatures
    labels: list
    parent_lb: float
    box: tuple = ()

    @property
    def nodes(self):
        return [lab.decision.as_tuple() for lab in self.labels]

    @property
    def m(self):
        return np.array([lab.m for lab in self.labels])

    def classes(self, M):
        return assign_labels(self.labels, M)

    def to_dict(self):
        return {"kind": "sample", "property_id": self.property_id, "network": self.network_key,
                "decisions": self.decisions, "box": [list(map(float, b)) for b in self.box],
                "features": self.features.to_dict(),
                "candidates": [lab.to_dict() for lab in self.labels],
                "parent_lb": float(self.parent_lb)}

    @classmethod
    def from_dict(cls, d, networks):
        labels = [StrongBranchLabel(BranchDecision(c["layer"], c["unit"]), c["m"],
                                    np.inf if c["lb1"] is None else c["lb1"],
                                    np.inf if c["lb2"] is None else c["lb2"])
                  for c in d["candidates"]]
        return cls(d["property_id"], d["network"], networks[d["network"]], d["decisions"],
                   gnn.NodeFeatures.from_dict(d["features"]), labels, d["parent_lb"],
                   tuple(np.asarray(b) for b in d.get("box", [])))


def assign_labels(labels, M=10):
    """Equal-width bins on [0, 1]: Y = min(floor(m * M), M - 1)."""
    if M < 2:
        raise ValueError("M must be at least 2")
    m = np.asarray([getattr(lab, "m", lab) for lab in labels], dtype=float)
    return np.minimum(np.floor(m * M), M - 1).astype(int)


def make_sample(problem, d, labels, network_key):
    """Snapshot a labelled subdomain; None when it carries no ranking signal."""
    ms = {lab.m for lab in labels}
    if len(labels) < 2 or len(ms) < 2:
        return None
    feats = gnn.extract_features(d, problem.network)
    return TrainingSample(problem.property_id, network_key, problem.network,
                          d.decisions.to_list(), feats,
                          [StrongBranchLabel(lab.decision, lab.m, lab.lb1, lab.lb2)
                           for lab in labels],
                          float(d.lb), (problem.box.lower.copy(), problem.box.upper.copy()))


# --------------------------------------------------------------------------
# dataset generation

@dataclass
class GenConfig:
    B: int = 20
    q: int = 10
    full_fraction: float = 0.25
    top_k: int = 30
    coverage: float = 0.05
    probe_branches: int = 200
    full_max_branches: int = 200
    seed: int = 0


def _label_step(problem, bab, rng, cfg):
    d = bab.next_domain()
    _, scores = sr_score(d, problem.network)
    cands = candidate_subset(d, scores, cfg.coverage, cfg.top_k, rng)
    labels = strong_branch(problem, d, cands)
    bab.apply(d, labels[0].decision, labels[0].children)
    return d, labels


def property_samples(problem, index, cfg, network_key=None):
    """Samples for one property, following the mixed full/partial procedure."""
    key = network_key or problem.property_id
    rng = np.random.default_rng([cfg.seed, index])
    out = []
    bab = BranchAndBound(problem)
    if bab.done:
        log.info("property %s needs no branching; skipped", problem.property_id)
        return out
    full = rng.random() <= cfg.full_fraction
    if full:
        probe = verify(problem, SrStrategy(), timeout=math.inf, seed=cfg.seed,
                       max_branches=cfg.probe_branches)
        full = probe.status != "timeout"
    if full:
        while not bab.done and bab.branches < cfg.full_max_branches:
            d, labels = _label_step(problem, bab, rng, cfg)
            s = make_sample(problem, d, labels, key)
            if s is not None:
                out.append(s)
        return out
    produced = 0
    while produced < cfg.B and not bab.done:
        k = int(rng.integers(0, cfg.q + 1))
        for _ in range(k):
            if bab.done:
                break
            d = bab.next_domain()
            bab.apply(d, sr_choice(d, problem.network))
        if bab.done:
            break
        d, labels = _label_step(problem, bab, rng, cfg)
        produced += 1
        s = make_sample(problem, d, labels, key)
        if s is not None:
            out.append(s)
    return out


def gen_dataset(properties, B=20, q=10, full_fraction=0.25, seed=0, **kw):
    """Strong-branching labelled samples over a list of verification problems."""
    if B < 1 or q < 1 or not 0 <= full_fraction <= 1:
        raise ValueError("need B >= 1, q >= 1 and full_fraction in [0, 1]")
    cfg = GenConfig(B=B, q=q, full_fraction=full_fraction, seed=seed, **kw)
    samples = []
    for i, problem in enumerate(properties):
        samples.extend(property_samples(problem, i, cfg))
    return samples


def write_dataset(path, samples, header=None):
    """JSONL: one header line, one line per distinct network, one per sample."""
    head = {"kind": "header", "schema_version": DATASET_SCHEMA, "binning": "equal-width",
            "dual_convention": DUAL_CONVENTION}
    head.update(header or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        seen = set()
        for s in samples:
            if s.network_key not in seen:
                seen.add(s.network_key)
                fh.write(json.dumps({"kind": "network", "key": s.network_key,
                                     "network": s.network.to_dict()}, sort_keys=True) + "\n")
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_dataset(path):
    header, networks, samples = None, {}, []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "header":
                if rec.get("schema_version") != DATASET_SCHEMA:
                    raise ValueError(f"unsupported dataset schema {rec.get('schema_version')}")
                header = rec
            elif kind == "network":
                networks[rec["key"]] = network_from_dict(rec["network"])
            elif kind == "sample":
                samples.append(TrainingSample.from_dict(rec, networks))
    return header, samples


def split_by_property(samples, val_fraction=0.2, seed=0):
    """Train/validation split keeping each property's samples together."""
    pids = sorted({s.property_id for s in samples})
    rng = np.random.default_rng(seed)
    rng.shuffle(pids)
    n_val = max(1, int(round(val_fraction * len(pids)))) if len(pids) > 1 else 0
    val = set(pids[:n_val])
    return [s for s in samples if s.property_id not in val], [s for s in samples if s.property_id in val]


# --------------------------------------------------------------------------
# optimisation

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr=1e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(arrays):
            g = grads[k] + self.weight_decay * arrays[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            arrays[k] = arrays[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    M: int = 10
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    lr_decay: float = 5.0
    decay_patience: int = 10
    stop_patience: int = 20
    max_epochs: int = 200
    p: int = 64
    T: int = 2
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")
        for name in ("lr", "weight_decay", "batch_size", "lr_decay", "decay_patience",
                     "stop_patience", "max_epochs", "p", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    params: gnn.GnnParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    aborted: bool = False


def sample_loss(sample, params, M):
    nodes = sample.nodes
    s = gnn.score_nodes(sample.features, sample.network, params, nodes)
    return gnn.hinge_rank_loss(s, sample.classes(M))


def mean_loss(samples, params, M):
    return float(np.mean([sample_loss(s, params, M) for s in samples])) if samples else 0.0


def _scores_all(samples, params):
    return [gnn.score_nodes(s.features, s.network, params, s.nodes) for s in samples]


def accuracy(samples, params, seed=0, threshold=0.9, scores=None):
    """(relative, absolute) accuracy of the argmax-scored candidate.

    Relative: chosen m >= threshold * max m. Absolute: chosen m >= threshold.
    Exact score ties are broken uniformly at random.
    """
    if not samples:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    scores = scores if scores is not None else _scores_all(samples, params)
    rel = ab = 0
    for s, sc in zip(samples, scores):
        m = s.m
        sc = np.where(np.isfinite(sc), sc, -np.inf)
        best = np.flatnonzero(sc == sc.max())
        i = int(best[rng.integers(len(best))]) if len(best) > 1 else int(best[0])
        rel += bool(m[i] >= threshold * m.max())
        ab += bool(m[i] >= threshold)
    return rel / len(samples), ab / len(samples)


def train(samples, config=None, val_samples=None, params=None, log_path=None):
    """Fit the GNN to strong-branching rankings; returns the best-validation checkpoint."""
    cfg = config or TrainConfig()
    if val_samples is None:
        samples, val_samples = split_by_property(samples, cfg.val_fraction, cfg.seed)
    if not samples or not val_samples:
        raise ValueError("training and validation splits must both be nonempty")
    if params is None:
        params = gnn.GnnParams.init(cfg.p, cfg.T, cfg.seed)
        params.norm = gnn.FeatureNorm.fit([s.features for s in samples])
    else:
        params = params.copy()
    opt = Adam(cfg.lr, cfg.weight_decay)
    best = TrainResult(params.copy(), best_val_loss=mean_loss(val_samples, params, cfg.M))
    stagnant = 0
    rows = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        losses = []
        aborted = False
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            total = {k: np.zeros_like(v) for k, v in params.arrays.items()}
            for s in batch:
                loss, g = gnn.loss_and_gradient(s.features, s.network, params, s.nodes,
                                                s.classes(cfg.M))
                losses.append(loss)
                for k in total:
                    total[k] += g[k]
            if not all(np.isfinite(losses[-len(batch):])):
                aborted = True
                break
            opt.step(params.arrays, {k: v / len(batch) for k, v in total.items()})
        if aborted:
            log.warning("non-finite loss at epoch %d; keeping last finite checkpoint", epoch)
            best.aborted = True
            break
        val_scores = _scores_all(val_samples, params)
        val_loss = float(np.mean([gnn.hinge_rank_loss(sc, s.classes(cfg.M))
                                  for s, sc in zip(val_samples, val_scores)]))
        acc_rel, acc_abs = accuracy(val_samples, params, seed=cfg.seed, scores=val_scores)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc_rel": acc_rel, "val_acc_abs": acc_abs, "lr": opt.lr}
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f acc %.3f/%.3f lr %.2e", epoch, row["train_loss"],
                 val_loss, acc_rel, acc_abs, opt.lr)
        if not np.isfinite(val_loss):
            best.aborted = True
            break
        if val_loss < best.best_val_loss:
            best.params, best.best_val_loss, best.best_epoch = params.copy(), val_loss, epoch
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= cfg.stop_patience:
                break
            if stagnant % cfg.decay_patience == 0:
                opt.lr /= cfg.lr_decay
    best.history = rows
    if log_path is not None:
        write_train_log(log_path, rows)
    return best


LOG_FIELDS = ["epoch", "train_loss", "val_loss", "val_acc_rel", "val_acc_abs", "lr"]


def write_train_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# online learning

def online_loss(params, record, feats, net, gamma=1.0, t=0.1):
    gap, grads = gnn.score_gap_and_gradient(feats, net, params, record.v_gnn.as_tuple(),
                                            record.v_h.as_tuple())
    # the indicator term is constant in the parameters
    return gap + gamma * float((record.m_h - record.m_gnn) > t), grads


def online_update(params, record, d, net, gamma=1.0, t=0.1, lr=1e-4, weight_decay=1e-4,
                  min_occurrence=2):
    """One Adam step on the online loss; returns a new parameter set."""
    if record.occurrence < min_occurrence:
        return params
    feats = gnn.extract_features(d, net)
    _, grads = online_loss(params, record, feats, net, gamma, t)
    new = params.copy()
    Adam(lr, weight_decay).step(new.arrays, grads)
    return new


def config_dict(cfg):
    return asdict(cfg)
