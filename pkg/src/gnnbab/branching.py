"""Branching strategies: random, SR heuristic, strong branching and the GNN.

A strategy exposes ``start(problem, ctx)`` (called once per run) and
``branch(problem, d, ctx) -> BranchOutcome``. Outcomes may carry the two
children when the strategy already solved them, so BaB can reuse the work.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from .bab import BranchDecision, improvement, split_relu
from .bounds import output_coefficients, relaxation
from .lp import NumericalError


@dataclass
class BranchOutcome:
    decision: BranchDecision
    children: tuple | None = None
    used_gnn: bool | None = None
    m: float | None = None


@dataclass
class StrongBranchLabel:
    decision: BranchDecision
    m: float
    lb1: float
    lb2: float
    children: tuple | None = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"layer": self.decision.layer, "unit": self.decision.unit, "m": self.m,
                "lb1": _finite(self.lb1), "lb2": _finite(self.lb2)}


def _finite(x):
    # json has no infinity; pruned children are stored as None
    return float(x) if np.isfinite(x) else None


@dataclass
class FailedDecisionRecord:
    fingerprint: str
    v_gnn: BranchDecision
    v_h: BranchDecision
    m_gnn: float
    m_h: float
    occurrence: int = 1

    @property
    def key(self):
        return (self.v_gnn.as_tuple(), self.v_h.as_tuple())


def domain_fingerprint(property_id, d):
    text = f"{property_id}|{d.decisions.fingerprint()}"
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def _require_candidates(d):
    cands = d.candidates()
    if not cands:
        raise ValueError("subdomain has no ambiguous ReLU to branch on")
    return cands


# --------------------------------------------------------------------------
# random

def random_choice(d, seed, step=0):
    cands = _require_candidates(d)
    rng = np.random.default_rng([int(seed), int(step)])
    return cands[int(rng.integers(len(cands)))]


class RandomStrategy:
    name = "random"
    uses_gnn = False

    def start(self, problem, ctx):
        pass

    def branch(self, problem, d, ctx):
        return BranchOutcome(random_choice(d, ctx.seed, ctx.step))


# --------------------------------------------------------------------------
# SR heuristic

def sr_score(d, net):
    """Intercept times the magnitude of its coefficient in the output lower bound.

    The intercept enters the lower bound only through negative backward
    coefficients, so nodes with a non-negative coefficient score 0.
    Returns (candidates, scores) in (layer, unit) order.
    """
    cands = d.candidates()
    if not cands:
        return [], np.zeros(0)
    lam = output_coefficients(net, d.bounds)
    scores = []
    for c in cands:
        _, beta = relaxation(d.bounds.lower[c.layer][c.unit], d.bounds.upper[c.layer][c.unit])
        scores.append(float(beta) * max(-lam[c.layer][c.unit], 0.0))
    return cands, np.asarray(scores)


def sr_choice(d, net):
    cands, scores = sr_score(d, net)
    if not cands:
        raise ValueError("subdomain has no ambiguous ReLU to branch on")
    return cands[int(np.argmax(scores))]


class SrStrategy:
    name = "sr"
    uses_gnn = False

    def start(self, problem, ctx):
        pass

    def branch(self, problem, d, ctx):
        return BranchOutcome(sr_choice(d, problem.network))


# --------------------------------------------------------------------------
# strong branching

def evaluate_split(problem, d, dec):
    """Split on ``dec``; returns (m, lb1, lb2, children). Failed LPs count as pruned."""
    try:
        children = split_relu(problem, d, dec)
        lb1, lb2 = children[0].lb, children[1].lb
    except NumericalError:
        children, lb1, lb2 = None, np.inf, np.inf
    return improvement(d.lb, lb1, lb2), lb1, lb2, children


def strong_branch(problem, d, candidates=None, keep_children=True):
    """Labels for every candidate, best first; ties keep (layer, unit) order."""
    candidates = d.candidates() if candidates is None else list(candidates)
    labels = []
    for dec in candidates:
        m, lb1, lb2, children = evaluate_split(problem, d, dec)
        labels.append(StrongBranchLabel(dec, m, lb1, lb2, children if keep_children else None))
    labels.sort(key=lambda s: (-s.m, s.decision.layer, s.decision.unit))
    return labels


def candidate_subset(d, scores, coverage=0.05, top_k=30, rng=None):
    """Top-k candidates by score plus a per-layer uniform sample."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    cands = d.candidates()
    scores = np.asarray(scores, dtype=float)
    rng = rng or np.random.default_rng(0)
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i]))
    chosen = {cands[i] for i in order[:top_k]}
    for k in sorted({c.layer for c in cands}):
        in_layer = [c for c in cands if c.layer == k]
        n = min(len(in_layer), math.ceil(coverage * len(in_layer)))
        for i in rng.choice(len(in_layer), size=n, replace=False):
            chosen.add(in_layer[int(i)])
    return sorted(chosen)


class StrongStrategy:
    """Exact strong branching over all (or the top-k SR) candidates."""
    name = "strong"
    uses_gnn = False

    def __init__(self, top_k=None, coverage=0.05):
        self.top_k, self.coverage = top_k, coverage

    def start(self, problem, ctx):
        pass

    def branch(self, problem, d, ctx):
        cands = d.candidates()
        if self.top_k is not None and len(cands) > self.top_k:
            _, scores = sr_score(d, problem.network)
            cands = candidate_subset(d, scores, self.coverage, self.top_k,
                                     np.random.default_rng([ctx.seed, ctx.step]))
        best = strong_branch(problem, d, cands)[0]
        return BranchOutcome(best.decision, best.children, None, best.m)


# --------------------------------------------------------------------------
# GNN

def gnn_choice(d, net, params):
    """Argmax-scored ambiguous node; ties resolved in (layer, unit) order."""
    if d.lp is None or d.lp.x0 is None:
        raise ValueError("subdomain has no cached LP solution")
    _require_candidates(d)
    feats = gnn.extract_features(d, net)
    nodes, scores = gnn.infer(feats, net, params)
    return BranchDecision(*nodes[int(np.argmax(scores))])


@dataclass
class FailsafeResult:
    decision: BranchDecision
    children: tuple | None
    used_gnn: bool
    record: FailedDecisionRecord | None
    m_gnn: float
    m_h: float | None
    m: float


def failsafe_choice(problem, d, params, threshold=0.2, gnn_decision=None):
    """GNN decision, backed by the SR heuristic when its improvement is small."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    net = problem.network
    v_gnn = gnn_decision or gnn_choice(d, net, params)
    m_gnn, _, _, ch_gnn = evaluate_split(problem, d, v_gnn)
    if m_gnn >= threshold:
        return FailsafeResult(v_gnn, ch_gnn, True, None, m_gnn, None, m_gnn)
    v_h = sr_choice(d, net)
    if v_h == v_gnn:
        return FailsafeResult(v_gnn, ch_gnn, True, None, m_gnn, m_gnn, m_gnn)
    m_h, _, _, ch_h = evaluate_split(problem, d, v_h)
    if m_h > m_gnn:
        rec = FailedDecisionRecord(domain_fingerprint(problem.property_id, d), v_gnn, v_h,
                                   m_gnn, m_h)
        return FailsafeResult(v_h, ch_h, False, rec, m_gnn, m_h, m_h)
    return FailsafeResult(v_gnn, ch_gnn, True, None, m_gnn, m_h, m_gnn)


class GnnStrategy:
    """GNN branching with the fail-safe, optionally fine-tuned online per property."""

    def __init__(self, params, threshold=0.2, online=False, gamma=1.0, t=0.1, lr=1e-4,
                 weight_decay=1e-4, min_occurrence=2):
        self.base_params = params
        self.threshold = threshold
        self.online = online
        self.gamma, self.t, self.lr, self.weight_decay = gamma, t, lr, weight_decay
        self.min_occurrence = min_occurrence
        self.name = "gnn-online" if online else "gnn"
        self.uses_gnn = True
        self.params = params
        self.failures = {}
        self.updates = 0
        self.choices = []

    def start(self, problem, ctx):
        # online updates touch a per-run copy only
        self.params = self.base_params.copy() if self.online else self.base_params
        self.failures = {}
        self.updates = 0
        self.choices = []

    def branch(self, problem, d, ctx):
        res = failsafe_choice(problem, d, self.params, self.threshold)
        self.choices.append(res)
        if res.record is not None:
            key = res.record.key
            if key in self.failures:
                old = self.failures[key]
                old.occurrence += 1
                old.fingerprint, old.m_gnn, old.m_h = (res.record.fingerprint, res.record.m_gnn,
                                                       res.record.m_h)
            else:
                self.failures[key] = res.record
            rec = self.failures[key]
            if self.online and rec.occurrence >= self.min_occurrence:
                from .learn import online_update
                self.params = online_update(self.params, rec, d, problem.network, self.gamma,
                                            self.t, lr=self.lr, weight_decay=self.weight_decay)
                self.updates += 1
        return BranchOutcome(res.decision, res.children, res.used_gnn, res.m)


def make_strategy(name, params=None, threshold=0.2, **kw):
    if name == "random":
        return RandomStrategy()
    if name == "sr":
        return SrStrategy()
    if name == "strong":
        return StrongStrategy(**kw)
    if name in ("gnn", "gnn-online"):
        if params is None:
            raise ValueError(f"strategy {name} needs a GNN checkpoint")
        return GnnStrategy(params, threshold, online=(name == "gnn-online"), **kw)
    raise ValueError(f"unknown strategy {name!r}")
