"""Satisfiability branch and bound over ReLU phase splits.

The global upper bound is pinned at 0: a subdomain is pruned once its lower
bound reaches 0 and the search stops as soon as any subdomain's upper bound
is negative.
"""
from __future__ import annotations

import heapq
import itertools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import BLOCKED, PASSING, ReluDecisionMap, linbound_bounds
from .lp import output_lower_bound, output_upper_bound

PRUNE_TOL = 1e-6
FALSIFY_TOL = 1e-6


@dataclass(frozen=True, order=True)
class BranchDecision:
    layer: int
    unit: int

    def as_tuple(self):
        return (self.layer, self.unit)


@dataclass(eq=False)
class Subdomain:
    decisions: ReluDecisionMap
    bounds: object
    lb: float
    ub: float
    lp: object = None
    point: np.ndarray | None = None
    depth: int = 0
    parent_decision: BranchDecision | None = None
    box: object = None

    @property
    def feasible(self):
        return np.isfinite(self.lb)

    @property
    def duals(self):
        return self.lp.duals if self.lp is not None else None

    def candidates(self):
        """Ambiguous ReLUs in (layer, unit) order."""
        if not self.feasible:
            return []
        return [BranchDecision(k, j) for k, j in self.bounds.ambiguous_nodes()]

    def has_ambiguous(self):
        return self.feasible and self.bounds.n_ambiguous() > 0


def bound_domain(problem, decisions, bounds, depth=0, parent_decision=None):
    """Solve the Planet LP on a domain and evaluate the network at its input point."""
    net, box = problem.network, problem.box
    if bounds.is_empty():
        return Subdomain(decisions, bounds, np.inf, np.inf, None, None, depth, parent_decision, box)
    res = output_lower_bound(net, box, decisions, bounds)
    if not res.feasible:
        return Subdomain(decisions, bounds, np.inf, np.inf, res, None, depth, parent_decision, box)
    point = box.clip(res.x0)
    ub = output_upper_bound(net, point)
    return Subdomain(decisions, bounds, res.lb, ub, res, point, depth, parent_decision, box)


def root_domain(problem):
    decisions = ReluDecisionMap.empty(problem.network)
    bounds = linbound_bounds(problem.network, problem.box, decisions)
    return bound_domain(problem, decisions, bounds)


def split_relu(problem, d, dec):
    """Fix ``dec`` blocked and passing; returns (blocked child, passing child)."""
    if d.decisions.get(dec.layer, dec.unit) != 0 or \
            not (d.bounds.lower[dec.layer][dec.unit] < 0 < d.bounds.upper[dec.layer][dec.unit]):
        raise ValueError(f"{dec} is not ambiguous in this subdomain")
    children = []
    for phase in (BLOCKED, PASSING):
        decisions = d.decisions.fix(dec.layer, dec.unit, phase)
        bounds = linbound_bounds(problem.network, problem.box, decisions, prior=d.bounds,
                                 start=dec.layer + 1)
        children.append(bound_domain(problem, decisions, bounds, d.depth + 1, dec))
    return tuple(children)


def improvement(parent_lb, child_lb1, child_lb2):
    """Relative improvement of two child lower bounds over a negative parent bound."""
    if not parent_lb < 0:
        raise ValueError("improvement is only defined for a negative parent bound")
    m = (min(child_lb1, 0.0) + min(child_lb2, 0.0) - 2.0 * parent_lb) / (-2.0 * parent_lb)
    return float(min(max(m, 0.0), 1.0))


class DomainQueue:
    """Lowest-lower-bound-first queue; ties resolved by insertion order."""

    def __init__(self):
        self._heap = []
        self._counter = itertools.count()

    def push(self, d):
        heapq.heappush(self._heap, (d.lb, next(self._counter), d))

    def __len__(self):
        return len(self._heap)

    def global_lb(self):
        return self._heap[0][0] if self._heap else np.inf

    def lbs(self):
        return [lb for lb, _, _ in self._heap]


def pick_out(queue):
    if not len(queue):
        raise IndexError("pick_out from an empty queue")
    return heapq.heappop(queue._heap)[2]


@dataclass
class Verdict:
    status: str
    counterexample: list | None = None
    branch_count: int = 0
    wall_time: float = 0.0
    gnn_usage_ratio: float | None = None
    property_id: str = ""
    strategy: str = ""
    seed: int = 0
    branch_sequence: list = field(default_factory=list)

    def to_json(self, include_sequence=True):
        d = asdict(self)
        if not include_sequence:
            d.pop("branch_sequence")
        return json.dumps(d, sort_keys=True)

    def append_to(self, path):
        with open(path, "a") as fh:
            fh.write(self.to_json() + "\n")


@dataclass
class BranchContext:
    """Per-run state handed to strategies."""
    seed: int
    step: int = 0
    gnn_branches: int = 0
    heuristic_branches: int = 0


class BranchAndBound:
    """Step-wise BaB state, shared by ``verify`` and dataset generation."""

    def __init__(self, problem, callback=None):
        self.problem = problem
        self.queue = DomainQueue()
        self.status = None
        self.counterexample = None
        self.branches = 0
        self.sequence = []
        self.callback = callback
        root = root_domain(problem)
        self.root = root
        self._admit(root)
        if self.status is None and not len(self.queue):
            self.status = "verified"

    @property
    def done(self):
        return self.status is not None

    def _admit(self, d):
        if self.callback is not None:
            self.callback(d)
        if not d.feasible:
            return
        if d.ub < -FALSIFY_TOL:
            self.status, self.counterexample = "falsified", d.point
            return
        if d.lb >= -PRUNE_TOL:
            return
        if not d.has_ambiguous():
            # exact leaf: the LP point realises the minimum
            if d.ub < 0:
                self.status, self.counterexample = "falsified", d.point
            return
        self.queue.push(d)

    def next_domain(self):
        return pick_out(self.queue)

    def apply(self, d, dec, children=None):
        """Branch ``d`` on ``dec`` (reusing precomputed children if given)."""
        if children is None:
            children = split_relu(self.problem, d, dec)
        self.branches += 1
        self.sequence.append(dec.as_tuple())
        for child in children:
            self._admit(child)
            if self.status is not None:
                return
        if not len(self.queue):
            self.status = "verified"


def verify(problem, strategy, timeout=60.0, seed=0, max_branches=None, callback=None):
    """Run BaB with ``strategy`` until verified, falsified, or out of budget."""
    start = time.perf_counter()
    ctx = BranchContext(seed=seed)
    strategy.start(problem, ctx)
    bab = BranchAndBound(problem, callback=callback)
    while not bab.done:
        if time.perf_counter() - start > timeout or \
                (max_branches is not None and bab.branches >= max_branches):
            bab.status = "timeout"
            break
        d = bab.next_domain()
        ctx.step = bab.branches
        outcome = strategy.branch(problem, d, ctx)
        if outcome.used_gnn is True:
            ctx.gnn_branches += 1
        elif outcome.used_gnn is False:
            ctx.heuristic_branches += 1
        bab.apply(d, outcome.decision, outcome.children)
    total = ctx.gnn_branches + ctx.heuristic_branches
    ratio = None
    if getattr(strategy, "uses_gnn", False):
        ratio = 1.0 - ctx.heuristic_branches / total if total else 1.0
    cex = None if bab.counterexample is None else [float(v) for v in bab.counterexample]
    return Verdict(bab.status, cex, bab.branches, time.perf_counter() - start, ratio,
                   problem.property_id, getattr(strategy, "name", type(strategy).__name__),
                   int(seed), [list(s) for s in bab.sequence])
