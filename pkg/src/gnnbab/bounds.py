"""Intermediate pre-activation bounds: interval and linear-bounds relaxations.

Layer indices are 0-based positions in ``Network.layers``; the ReLU following
layer ``k`` (for ``k < L - 1``) is addressed by ``(k, unit)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCKED, UNDECIDED, PASSING = -1, 0, 1


@dataclass(frozen=True)
class RelaxationParams:
    alpha: float
    beta: float


def alpha_beta(l, u):
    """Slope and intercept of the ReLU triangle relaxation on ``[l, u]``."""
    if l > u:
        raise ValueError(f"lower bound {l} exceeds upper bound {u}")
    if u <= 0:
        return RelaxationParams(0.0, 0.0)
    if l >= 0:
        return RelaxationParams(1.0, 0.0)
    return RelaxationParams(u / (u - l), -l * u / (u - l))


def relaxation(l, u):
    """Vectorised ``alpha_beta`` over arrays of bounds."""
    l, u = np.asarray(l, dtype=float), np.asarray(u, dtype=float)
    amb = (l < 0) & (u > 0)
    width = np.where(amb, u - l, 1.0)
    alpha = np.where(amb, u / width, np.where(l >= 0, 1.0, 0.0))
    alpha = np.where(u <= 0, 0.0, alpha)
    beta = np.where(amb, -l * u / width, 0.0)
    return alpha, beta


class ReluDecisionMap:
    """Per-ReLU phase decisions; one int8 array per hidden layer."""

    __slots__ = ("phases",)

    def __init__(self, phases):
        self.phases = tuple(np.asarray(p, dtype=np.int8) for p in phases)

    @classmethod
    def empty(cls, net):
        return cls(np.zeros(n, dtype=np.int8) for n in net.hidden_sizes)

    def fix(self, layer, unit, phase):
        phases = [p.copy() for p in self.phases]
        phases[layer][unit] = phase
        return ReluDecisionMap(phases)

    def get(self, layer, unit):
        return int(self.phases[layer][unit])

    def count(self):
        return int(sum(np.count_nonzero(p) for p in self.phases))

    def fingerprint(self):
        return "|".join(",".join(f"{u}{'+' if p[u] > 0 else '-'}" for u in np.flatnonzero(p))
                        for p in self.phases)

    def to_list(self):
        return [[int(u), int(p[u])] for p in self.phases for u in np.flatnonzero(p)]

    def decided(self):
        """List of (layer, unit, phase) for every fixed ReLU."""
        return [(k, int(u), int(p[u])) for k, p in enumerate(self.phases)
                for u in np.flatnonzero(p)]

    def __eq__(self, other):
        return isinstance(other, ReluDecisionMap) and len(self.phases) == len(other.phases) \
            and all(np.array_equal(a, b) for a, b in zip(self.phases, other.phases))

    def __repr__(self):
        return f"ReluDecisionMap({self.fingerprint()!r})"


@dataclass
class LayerBounds:
    """Pre-activation bounds for every affine layer, output layer included."""
    lower: list
    upper: list

    def copy(self):
        return LayerBounds([a.copy() for a in self.lower], [a.copy() for a in self.upper])

    def is_empty(self, tol=1e-9):
        return any(np.any(lo > hi + tol) for lo, hi in zip(self.lower, self.upper))

    def ambiguous(self, k):
        return (self.lower[k] < 0) & (self.upper[k] > 0)

    def ambiguous_nodes(self):
        return [(k, int(j)) for k in range(len(self.lower) - 1)
                for j in np.flatnonzero(self.ambiguous(k))]

    def n_ambiguous(self):
        return sum(int(np.count_nonzero(self.ambiguous(k))) for k in range(len(self.lower) - 1))

    @property
    def output(self):
        return float(self.lower[-1][0]), float(self.upper[-1][0])


def _clip_decided(lo, hi, phases):
    lo, hi = lo.copy(), hi.copy()
    hi = np.where(phases == BLOCKED, np.minimum(hi, 0.0), hi)
    lo = np.where(phases == PASSING, np.maximum(lo, 0.0), lo)
    return lo, hi


def _interval_affine(layer, lo, hi):
    w = layer.matrix
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    b = layer.flat_bias
    return wp @ lo + wn @ hi + b, wp @ hi + wn @ lo + b


def interval_bounds(net, box, decisions=None):
    """Naive interval propagation, honouring fixed ReLU phases."""
    decisions = decisions or ReluDecisionMap.empty(net)
    lo, hi = box.lower, box.upper
    lower, upper = [], []
    for k, layer in enumerate(net.layers):
        l, u = _interval_affine(layer, lo, hi)
        if k < net.depth - 1:
            l, u = _clip_decided(l, u, decisions.phases[k])
            lo, hi = np.maximum(l, 0.0), np.maximum(u, 0.0)
        lower.append(l)
        upper.append(u)
    return LayerBounds(lower, upper)


def backsubstitute(net, box, lower, upper, k):
    """Linear lower/upper bounds on layer ``k`` given bounds on layers ``< k``.

    Every earlier ReLU is replaced by two parallel lines of slope
    ``u/(u-l)``: the lower one through the origin, the upper one shifted by
    the intercept. Both share the slope, so a single coefficient matrix is
    carried backwards and only the constants differ.
    """
    layer = net.layers[k]
    lam = layer.matrix
    c_lo = layer.flat_bias.copy()
    c_up = layer.flat_bias.copy()
    for j in range(k - 1, -1, -1):
        alpha, beta = relaxation(lower[j], upper[j])
        c_lo += np.minimum(lam, 0.0) @ beta
        c_up += np.maximum(lam, 0.0) @ beta
        lam = lam * alpha
        prev = net.layers[j]
        c_lo += lam @ prev.flat_bias
        c_up += lam @ prev.flat_bias
        lam = lam @ prev.matrix
    lp, ln = np.maximum(lam, 0.0), np.minimum(lam, 0.0)
    return lp @ box.lower + ln @ box.upper + c_lo, lp @ box.upper + ln @ box.lower + c_up


def output_coefficients(net, bounds):
    """Backward coefficient on each hidden post-activation for the output bound.

    Returns one vector per hidden layer: the multiplier that node's ReLU
    output carries in the linear-bounds backward pass of the (scalar) output.
    """
    lam = net.layers[-1].matrix
    coeffs = [None] * (net.depth - 1)
    for j in range(net.depth - 2, -1, -1):
        coeffs[j] = lam.sum(axis=0)
        alpha, _ = relaxation(bounds.lower[j], bounds.upper[j])
        lam = (lam * alpha) @ net.layers[j].matrix
    return coeffs


def linbound_bounds(net, box, decisions=None, prior=None, start=0, intersect=True):
    """Layer-by-layer linear-bounds relaxation.

    With ``intersect`` the result at each layer is also intersected with an
    interval step from the previous layer's (already tightened) bounds, so it
    is never looser than ``interval_bounds``. ``prior`` bounds are valid for a
    superset of this domain: layers before ``start`` are copied from it and
    later layers are intersected with it.
    """
    decisions = decisions or ReluDecisionMap.empty(net)
    lower, upper = [], []
    for k in range(start):
        lower.append(prior.lower[k].copy())
        upper.append(prior.upper[k].copy())
        if k < net.depth - 1:
            lower[k], upper[k] = _clip_decided(lower[k], upper[k], decisions.phases[k])
    for k in range(start, net.depth):
        l, u = backsubstitute(net, box, lower, upper, k)
        if intersect:
            if k == 0:
                il, iu = _interval_affine(net.layers[0], box.lower, box.upper)
            else:
                il, iu = _interval_affine(net.layers[k], np.maximum(lower[k - 1], 0.0),
                                          np.maximum(upper[k - 1], 0.0))
            l, u = np.maximum(l, il), np.minimum(u, iu)
        if prior is not None:
            l, u = np.maximum(l, prior.lower[k]), np.minimum(u, prior.upper[k])
        if k < net.depth - 1:
            l, u = _clip_decided(l, u, decisions.phases[k])
        lower.append(l)
        upper.append(u)
    return LayerBounds(lower, upper)
