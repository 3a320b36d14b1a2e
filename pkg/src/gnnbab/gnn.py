"""Graph neural network over the verified network's computation graph.

Every input unit, hidden ReLU (pre/post pair merged into one node) and the
scalar output is a graph node carrying a p-dimensional embedding. Embeddings
start at zero and are refined by T rounds of a forward (input to output)
and a backward (output to input) pass that reuse the network's own weights
as edge maps. A small head scores every ambiguous ReLU.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .bounds import relaxation
from .network import fanout_counts, linear_map, linear_map_transpose

SCHEMA_VERSION = 1

# name -> ((fixed, multiple of p) input width, number of layers)
_SPECS = {
    "inp": ((3, 0), 2),
    "act_lf": ((9, 0), 2),
    "act_nb": ((0, 2), 2),
    "act_com": ((0, 2), 2),
    "out_lf": ((4, 0), 1),
    "out_com": ((0, 2), 2),
    "bact_lf1": ((9, 0), 2),
    "bact_lf2": ((0, 4), 2),
    "bact_nb": ((0, 2), 2),
    "bact_com": ((0, 2), 2),
    "binp_lf": ((2, 0), 2),
    "binp_com": ((0, 2), 2),
    "score": ((0, 1), 2),
}

GROUPS = {
    "theta0": ("inp",),
    "theta1": ("act_lf", "act_nb", "act_com"),
    "theta2": ("out_lf", "out_com"),
    "theta3": ("bact_lf1", "bact_lf2", "bact_nb", "bact_com"),
    "theta4": ("binp_lf", "binp_com"),
    "theta5": ("score",),
}

FEATURE_WIDTHS = {"inp": 3, "act": 9, "out": 4, "binp": 2}
DUAL_COLS = slice(6, 9)


# --------------------------------------------------------------------------
# features

@dataclass
class NodeFeatures:
    """Raw (unnormalised) per-node features of one subdomain."""
    inp: np.ndarray          # (n0, 3): l, u, primal
    act: list                # per hidden layer (n, 9): l, u, beta, bias, pre, post, d1, d2, d3
    out: np.ndarray          # (1, 4): lp lb, output upper bound, bias, primal
    binp: np.ndarray         # (n0, 2): u, l

    def ambiguous(self, k):
        a = self.act[k]
        return (a[:, 0] < 0) & (a[:, 1] > 0)

    def candidates(self):
        return [(k, int(j)) for k in range(len(self.act)) for j in np.flatnonzero(self.ambiguous(k))]

    def to_dict(self):
        return {"inp": self.inp.tolist(), "act": [a.tolist() for a in self.act],
                "out": self.out.tolist(), "binp": self.binp.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["inp"], dtype=float).reshape(-1, 3),
                   [np.asarray(a, dtype=float).reshape(-1, 9) for a in d["act"]],
                   np.asarray(d["out"], dtype=float).reshape(1, 4),
                   np.asarray(d["binp"], dtype=float).reshape(-1, 2))


def extract_features(d, net):
    """Node features of subdomain ``d``; needs the cached LP solution."""
    lp = getattr(d, "lp", None)
    if lp is None or lp.x0 is None:
        raise ValueError("subdomain has no cached LP solution")
    return _features(net, d.box, d.bounds, lp, np.asarray(lp.x0, dtype=float))


def features_from(net, box, bounds, lp):
    """Feature extraction from explicit pieces (box, bounds, LP result)."""
    return _features(net, box, bounds, lp, np.asarray(lp.x0, dtype=float))


def _features(net, box, bounds, lp, x0):
    if box is None:
        raise ValueError("input box required for feature extraction")
    inp = np.stack([box.lower, box.upper, x0], axis=1)
    act = []
    for k in range(net.depth - 1):
        l, u = bounds.lower[k], bounds.upper[k]
        _, beta = relaxation(l, u)
        amb = (l < 0) & (u > 0)
        duals = np.where(amb[:, None], lp.duals[k], 0.0)
        bias = net.layers[k].flat_bias
        act.append(np.column_stack([l, u, beta, bias, lp.pre[k], lp.post[k], duals]))
    out = np.array([[lp.lb, bounds.upper[-1][0], net.layers[-1].flat_bias[0], lp.output]])
    binp = np.stack([box.upper, box.lower], axis=1)
    return NodeFeatures(inp, act, out, binp)


# --------------------------------------------------------------------------
# normalisation

@dataclass
class FeatureNorm:
    """Per-feature affine standardisation; duals are only rescaled."""
    mean: dict = field(default_factory=lambda: {k: np.zeros(w) for k, w in FEATURE_WIDTHS.items()})
    std: dict = field(default_factory=lambda: {k: np.ones(w) for k, w in FEATURE_WIDTHS.items()})

    @classmethod
    def fit(cls, feature_list):
        rows = {k: [] for k in FEATURE_WIDTHS}
        for f in feature_list:
            rows["inp"].append(f.inp)
            rows["act"].extend(f.act)
            rows["out"].append(f.out)
            rows["binp"].append(f.binp)
        norm = cls()
        for k, parts in rows.items():
            if not parts:
                continue
            x = np.concatenate(parts, axis=0)
            norm.mean[k] = x.mean(axis=0)
            s = x.std(axis=0)
            norm.std[k] = np.where(s > 1e-8, s, 1.0)
        return norm

    def apply(self, key, x):
        return (x - self.mean[key]) / self.std[key]

    def to_dict(self):
        return {"mean": {k: v.tolist() for k, v in self.mean.items()},
                "std": {k: v.tolist() for k, v in self.std.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls({k: np.asarray(v, dtype=float) for k, v in d["mean"].items()},
                   {k: np.asarray(v, dtype=float) for k, v in d["std"].items()})


# --------------------------------------------------------------------------
# parameters

@dataclass
class GnnParams:
    arrays: dict
    p: int = 64
    T: int = 2
    seed: int = 0
    norm: FeatureNorm = field(default_factory=FeatureNorm)

    @classmethod
    def init(cls, p=64, T=2, seed=0, sigma=0.1):
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, ((a, m), depth) in _SPECS.items():
            width_in = a + m * p
            width_out = 1 if name == "score" else p
            if depth == 1:
                arrays[f"{name}.w1"] = rng.normal(0.0, sigma, (width_in, width_out))
                arrays[f"{name}.b1"] = np.zeros(width_out)
            else:
                arrays[f"{name}.w1"] = rng.normal(0.0, sigma, (width_in, p))
                arrays[f"{name}.b1"] = np.zeros(p)
                arrays[f"{name}.w2"] = rng.normal(0.0, sigma, (p, width_out))
                arrays[f"{name}.b2"] = np.zeros(width_out)
        return cls(arrays, p, T, seed)

    def copy(self):
        return GnnParams({k: v.copy() for k, v in self.arrays.items()}, self.p, self.T,
                         self.seed, FeatureNorm.from_dict(self.norm.to_dict()))

    @property
    def names(self):
        return list(self.arrays)

    def group_of(self, name):
        base = name.split(".")[0]
        for g, members in GROUPS.items():
            if base in members:
                return g
        raise KeyError(name)

    def n_params(self):
        return int(sum(v.size for v in self.arrays.values()))

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "p": self.p, "T": self.T, "seed": self.seed,
                "feature_norm": self.norm.to_dict(),
                "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                           for k, v in self.arrays.items()}}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {d.get('schema_version')}")
        arrays = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
                  for k, v in d["params"].items()}
        missing = set(cls.init(p=1).arrays) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        return cls(arrays, int(d["p"]), int(d["T"]), int(d["seed"]),
                   FeatureNorm.from_dict(d["feature_norm"]))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# graph preparation

@dataclass
class _Prepared:
    inp: np.ndarray
    binp: np.ndarray
    out: np.ndarray
    act: list
    alpha: list
    alpha2: list
    amb: list
    duals: list


def prepare(feats, norm):
    """Normalise features and derive gating ratios and ambiguity masks."""
    act, alpha, alpha2, amb, duals = [], [], [], [], []
    dual_scale = norm.std["act"][DUAL_COLS]
    for a in feats.act:
        l, u = a[:, 0], a[:, 1]
        al, _ = relaxation(l, np.maximum(u, l))
        m = (l < 0) & (u > 0)
        act.append(norm.apply("act", a))
        alpha.append(al[:, None])
        alpha2.append(np.where(m, 1.0 - al, al)[:, None])
        amb.append(m.astype(float)[:, None])
        duals.append(a[:, DUAL_COLS] / dual_scale)
    return _Prepared(norm.apply("inp", feats.inp), norm.apply("binp", feats.binp),
                     norm.apply("out", feats.out), act, alpha, alpha2, amb, duals)


def _mlp(tape, P, name, x):
    h = tape.add_bias(tape.matmul(x, P[f"{name}.w1"]), P[f"{name}.b1"])
    if f"{name}.w2" not in P:
        return tape.relu(h)
    h = tape.relu(h)
    return tape.add_bias(tape.matmul(h, P[f"{name}.w2"]), P[f"{name}.b2"])


def _emap(tape, layer, x):
    return tape.linear(x, lambda v: linear_map(layer, v), lambda g: linear_map_transpose(layer, g))


def _emap_t(tape, layer, x):
    e = tape.linear(x, lambda v: linear_map_transpose(layer, v), lambda g: linear_map(layer, g))
    if layer.kind == "conv2d":
        e = tape.scale(e, 1.0 / fanout_counts(layer)[:, None])
    return e


@dataclass
class EmbeddingState:
    inp: object
    hidden: list
    out: object

    @classmethod
    def zeros(cls, net, p):
        return cls(np.zeros((net.input_size, p)), [np.zeros((n, p)) for n in net.hidden_sizes],
                   np.zeros((1, p)))

    def values(self):
        v = lambda x: x.value if isinstance(x, Node) else x  # noqa: E731
        return EmbeddingState(v(self.inp), [v(h) for h in self.hidden], v(self.out))


def _forward(tape, P, F, net, state, first_round):
    mu_in = _mlp(tape, P, "inp", F.inp) if first_round else state.inp
    prev = mu_in
    hidden = []
    for k in range(net.depth - 1):
        r = tape.scale(_mlp(tape, P, "act_lf", F.act[k]), F.amb[k])
        e = _emap(tape, net.layers[k], prev)
        n = _mlp(tape, P, "act_nb", tape.concat([tape.scale(e, F.alpha[k]), tape.scale(e, F.alpha2[k])]))
        prev = _mlp(tape, P, "act_com", tape.concat([r, n]))
        hidden.append(prev)
    r = _mlp(tape, P, "out_lf", F.out)
    e = _emap(tape, net.layers[-1], prev)
    out = _mlp(tape, P, "out_com", tape.concat([r, e]))
    return EmbeddingState(mu_in, hidden, out)


def _backward(tape, P, F, net, state):
    nxt = state.out
    hidden = [None] * (net.depth - 1)
    for k in range(net.depth - 2, -1, -1):
        rb = tape.scale(_mlp(tape, P, "bact_lf1", F.act[k]), F.amb[k])
        d = F.duals[k]
        gated = tape.concat([tape.scale(rb, d[:, 0:1]), tape.scale(rb, d[:, 1:2]),
                             tape.scale(rb, d[:, 2:3]), rb])
        rb2 = tape.scale(_mlp(tape, P, "bact_lf2", gated), F.amb[k])
        e = _emap_t(tape, net.layers[k + 1], nxt)
        n = _mlp(tape, P, "bact_nb", tape.concat([tape.scale(e, F.alpha[k]), tape.scale(e, F.alpha2[k])]))
        nxt = _mlp(tape, P, "bact_com", tape.concat([rb2, n]))
        hidden[k] = nxt
    r0 = _mlp(tape, P, "binp_lf", F.binp)
    e0 = _emap_t(tape, net.layers[0], nxt)
    mu_in = _mlp(tape, P, "binp_com", tape.concat([r0, e0]))
    return EmbeddingState(mu_in, hidden, state.out)


def _leaves(tape, params):
    return {k: tape.leaf(v) for k, v in params.arrays.items()}


def _embed(tape, P, F, net, T, p):
    state = EmbeddingState.zeros(net, p)
    for t in range(T):
        state = _forward(tape, P, F, net, state, first_round=(t == 0))
        state = _backward(tape, P, F, net, state)
    return state


def _scores(tape, P, state, nodes):
    """Score column for the node list [(layer, unit)], aligned with it."""
    if not nodes:
        return tape.leaf(np.zeros((0, 1)))
    layers = sorted({k for k, _ in nodes})
    stacked_order = [i for k in layers for i, (kk, _) in enumerate(nodes) if kk == k]
    parts = [tape.rows(state.hidden[k], np.array([j for kk, j in nodes if kk == k]))
             for k in layers]
    s = _mlp(tape, P, "score", tape.vstack(parts))
    pos = np.empty(len(nodes), dtype=int)
    pos[stacked_order] = np.arange(len(nodes))
    return tape.rows(s, pos)


# --------------------------------------------------------------------------
# public api

def forward_pass(state, feats, net, params, first_round):
    tape = Tape()
    F = prepare(feats, params.norm)
    return _forward(tape, _leaves(tape, params), F, net, state, first_round).values()


def backward_pass(state, feats, net, params):
    tape = Tape()
    F = prepare(feats, params.norm)
    return _backward(tape, _leaves(tape, params), F, net, state).values()


def embeddings(feats, net, params):
    tape = Tape()
    F = prepare(feats, params.norm)
    return _embed(tape, _leaves(tape, params), F, net, params.T, params.p).values()


def score_nodes(feats, net, params, nodes):
    """Scores for an explicit node list, aligned with it."""
    tape = Tape()
    P = _leaves(tape, params)
    F = prepare(feats, params.norm)
    state = _embed(tape, P, F, net, params.T, params.p)
    return _scores(tape, P, state, list(nodes)).value.reshape(-1)


def infer(feats, net, params):
    """Scores of every ambiguous node, as (nodes, scores) in (layer, unit) order."""
    nodes = feats.candidates()
    return nodes, score_nodes(feats, net, params, nodes)


def hinge_rank_loss(scores, labels):
    """Mean pairwise hinge (1 - (s_j - s_i))_+ over pairs with Y_j > Y_i."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels)
    better = y[None, :] > y[:, None]
    k = int(better.sum())
    if k == 0:
        warnings.warn("no ranked pair in sample; loss defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    margin = 1.0 - (s[None, :] - s[:, None])
    return float(np.maximum(margin, 0.0)[better].sum() / k)


def loss_and_gradient(feats, net, params, nodes, labels):
    """Hinge-rank loss over ``nodes`` and its gradient for every parameter."""
    y = np.asarray(labels)
    better = y[None, :] > y[:, None]
    if not better.any():
        warnings.warn("no ranked pair in sample; loss defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0, {k: np.zeros_like(v) for k, v in params.arrays.items()}
    tape = Tape()
    P = _leaves(tape, params)
    F = prepare(feats, params.norm)
    state = _embed(tape, P, F, net, params.T, params.p)
    s = _scores(tape, P, state, list(nodes))
    loss = tape.pairwise_hinge(s, better)
    tape.backward(loss)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in P.items()}
    return float(loss.value), grads


def loss_gradient(feats, net, params, nodes, labels):
    return loss_and_gradient(feats, net, params, nodes, labels)[1]


def score_gap_and_gradient(feats, net, params, v_gnn, v_h):
    """g_s(mu_gnn) - g_s(mu_h) and its parameter gradient."""
    tape = Tape()
    P = _leaves(tape, params)
    F = prepare(feats, params.norm)
    state = _embed(tape, P, F, net, params.T, params.p)
    s = _scores(tape, P, state, [tuple(v_gnn), tuple(v_h)])
    gap = tape.sub(tape.pick(s, 0), tape.pick(s, 1))
    tape.backward(gap)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in P.items()}
    return float(gap.value), grads
