"""ReLU networks, their evaluation, and property encoding.

A network is an ordered list of affine layers (dense or conv2d). Every layer
except the last is followed by an implicit ReLU. All activations are handled
as flat vectors; conv layers carry the (channels, height, width) shapes needed
to fold and unfold them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def conv_output_hw(h, w, kernel, stride, padding):
    kh, kw = kernel
    return ((h + 2 * padding[0] - kh) // stride[0] + 1,
            (w + 2 * padding[1] - kw) // stride[1] + 1)


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    input_shape: tuple
    output_shape: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    @classmethod
    def dense(cls, weight, bias):
        weight = np.asarray(weight, dtype=float)
        bias = np.asarray(bias, dtype=float).reshape(-1)
        if weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got shape {weight.shape}")
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(f"dense bias length {bias.shape[0]} != {weight.shape[0]} outputs")
        return cls("dense", weight, bias, (weight.shape[1],), (weight.shape[0],))

    @classmethod
    def conv2d(cls, weight, bias, input_shape, stride=(1, 1), padding=(0, 0)):
        weight = np.asarray(weight, dtype=float)
        bias = np.asarray(bias, dtype=float).reshape(-1)
        stride, padding = tuple(int(s) for s in stride), tuple(int(p) for p in padding)
        input_shape = tuple(int(s) for s in input_shape)
        if weight.ndim != 4:
            raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.shape}")
        if len(input_shape) != 3 or input_shape[0] != weight.shape[1]:
            raise ShapeError(f"conv2d input shape {input_shape} does not match "
                             f"{weight.shape[1]} input channels")
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(f"conv2d bias length {bias.shape[0]} != {weight.shape[0]} channels")
        if min(stride) < 1 or min(padding) < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        ho, wo = conv_output_hw(input_shape[1], input_shape[2], weight.shape[2:], stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {weight.shape[2:]} does not fit input {input_shape}")
        return cls("conv2d", weight, bias, input_shape, (weight.shape[0], ho, wo), stride, padding)

    @property
    def in_size(self):
        return int(np.prod(self.input_shape))

    @property
    def out_size(self):
        return int(np.prod(self.output_shape))

    @cached_property
    def flat_bias(self):
        """Bias broadcast to every output unit (per spatial position for conv)."""
        if self.kind == "dense":
            return self.bias
        return np.repeat(self.bias, self.output_shape[1] * self.output_shape[2])

    @cached_property
    def matrix(self):
        """Explicit (out_size, in_size) matrix of the layer's linear part."""
        if self.kind == "dense":
            return self.weight
        return linear_map(self, np.eye(self.in_size))

    def to_dict(self):
        d = {"type": self.kind, "weight": self.weight.tolist(), "bias": self.bias.tolist()}
        if self.kind == "conv2d":
            d.update(stride=list(self.stride), padding=list(self.padding),
                     input_shape=list(self.input_shape))
        return d


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.out_size != cur.in_size:
                raise ShapeError(f"layer {i} ({cur.kind}) expects {cur.in_size} inputs "
                                 f"but layer {i - 1} produces {prev.out_size}")
            if cur.kind == "conv2d" and prev.output_shape != cur.input_shape \
                    and prev.kind == "conv2d":
                raise ShapeError(f"layer {i} conv input shape {cur.input_shape} does not "
                                 f"match previous output shape {prev.output_shape}")

    @property
    def depth(self):
        return len(self.layers)

    @property
    def input_size(self):
        return self.layers[0].in_size

    @property
    def output_size(self):
        return self.layers[-1].out_size

    @property
    def hidden_sizes(self):
        return [layer.out_size for layer in self.layers[:-1]]

    def to_dict(self):
        return {"layers": [layer.to_dict() for layer in self.layers]}


@dataclass(frozen=True)
class InputBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ShapeError("box lower and upper differ in length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.shape[0]

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass(frozen=True, eq=False)
class VerificationProblem:
    network: Network
    box: InputBox
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.network.output_size != 1:
            raise ShapeError("verification network must have a single output")
        if self.box.dim != self.network.input_size:
            raise ShapeError(f"box has {self.box.dim} dims, network expects "
                             f"{self.network.input_size}")

    @property
    def property_id(self):
        return str(self.metadata.get("property_id", "property"))


# --------------------------------------------------------------------------
# linear maps

def _as_columns(layer, v, size):
    v = np.asarray(v, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] != size:
        raise ShapeError(f"expected {size} rows for {layer.kind} layer, got shape {v.shape}")
    return v, squeeze


def linear_map(layer, v):
    """Apply the layer's linear part (no bias) to each column of ``v``."""
    v, squeeze = _as_columns(layer, v, layer.in_size)
    if layer.kind == "dense":
        out = layer.weight @ v
    else:
        c, h, w = layer.input_shape
        ph, pw = layer.padding
        sh, sw = layer.stride
        kh, kw = layer.weight.shape[2:]
        _, ho, wo = layer.output_shape
        x = v.T.reshape(-1, c, h, w)
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        out = np.einsum("pcyxij,ocij->poyx", win, layer.weight, optimize=True)
        out = out.reshape(out.shape[0], -1).T
    return out[:, 0] if squeeze else out


def linear_map_transpose(layer, v):
    """Apply the adjoint of ``linear_map`` (transposed convolution for conv)."""
    v, squeeze = _as_columns(layer, v, layer.out_size)
    if layer.kind == "dense":
        out = layer.weight.T @ v
    else:
        c, h, w = layer.input_shape
        ph, pw = layer.padding
        sh, sw = layer.stride
        kh, kw = layer.weight.shape[2:]
        o, ho, wo = layer.output_shape
        g = v.T.reshape(-1, o, ho, wo)
        acc = np.zeros((g.shape[0], c, h + 2 * ph, w + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                acc[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                    np.einsum("poyx,oc->pcyx", g, layer.weight[:, :, i, j])
        out = acc[:, :, ph:ph + h, pw:pw + w].reshape(g.shape[0], -1).T
    return out[:, 0] if squeeze else out


def fanout_counts(layer):
    """Number of output units each input unit connects to."""
    if layer.kind == "dense":
        return np.full(layer.in_size, layer.out_size, dtype=int)
    ones = Layer.conv2d(np.ones_like(layer.weight), np.zeros_like(layer.bias),
                        layer.input_shape, layer.stride, layer.padding)
    return np.rint(linear_map_transpose(ones, np.ones(layer.out_size))).astype(int)


# --------------------------------------------------------------------------
# evaluation

def forward(net, x):
    """Return (pre-activations, post-activations) per layer for input ``x``.

    ``pre[i]`` is the output of affine layer i; ``post[i]`` is its ReLU, with
    ``post[-1] == pre[-1]`` for the last layer.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != net.input_size:
        raise ShapeError(f"input has {x.shape[0]} entries, network expects {net.input_size}")
    pre, post = [], []
    for i, layer in enumerate(net.layers):
        z = layer.matrix @ x + (layer.flat_bias if x.ndim == 1 else layer.flat_bias[:, None])
        pre.append(z)
        x = np.maximum(z, 0.0) if i < net.depth - 1 else z
        post.append(x)
    return pre, post


def evaluate(net, x):
    """Exact network output; a scalar for single-output networks."""
    out = forward(net, np.asarray(x, dtype=float).reshape(-1))[1][-1]
    return float(out[0]) if out.shape[0] == 1 else out


def evaluate_batch(net, xs):
    """Outputs for the rows of ``xs``; shape (n, outputs)."""
    return forward(net, np.asarray(xs, dtype=float).T)[1][-1].T


# --------------------------------------------------------------------------
# property encoding

def encode_property(net0, c, c_prime, x0, eps, clamp=True, metadata=None):
    """Merge ``(e_c - e_c')^T f(x)`` into the last layer and build the eps box."""
    k = net0.output_size
    if not (0 <= c < k and 0 <= c_prime < k):
        raise ValueError(f"labels ({c}, {c_prime}) out of range for {k} outputs")
    if c == c_prime:
        raise ValueError("c and c_prime must differ")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    last = net0.layers[-1]
    row = np.zeros(k)
    row[c], row[c_prime] = 1.0, -1.0
    merged = Layer.dense((row @ last.matrix)[None, :], [row @ last.flat_bias])
    net = Network(tuple(net0.layers[:-1]) + (merged,))
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    lo, hi = x0 - eps, x0 + eps
    if clamp:
        lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    meta = {"c": int(c), "c_prime": int(c_prime), "epsilon": float(eps)}
    meta.update(metadata or {})
    return VerificationProblem(net, InputBox(lo, hi), meta)


# --------------------------------------------------------------------------
# IO

def network_from_dict(d):
    layers = []
    for i, spec in enumerate(d["layers"]):
        kind = spec.get("type")
        try:
            if kind == "dense":
                layers.append(Layer.dense(spec["weight"], spec["bias"]))
            elif kind == "conv2d":
                if "input_shape" in spec:
                    shape = spec["input_shape"]
                elif layers and layers[-1].kind == "conv2d":
                    shape = layers[-1].output_shape
                else:
                    raise ShapeError("conv2d layer needs input_shape")
                layers.append(Layer.conv2d(spec["weight"], spec["bias"], shape,
                                           spec.get("stride", (1, 1)),
                                           spec.get("padding", (0, 0))))
            else:
                raise ShapeError(f"unknown layer type {kind!r}")
        except (ShapeError, ValueError) as err:
            raise ShapeError(f"layer {i}: {err}") from err
    return Network(tuple(layers))


def load_network(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: not valid JSON ({err})") from err
    return network_from_dict(d)


def save_network(net, path):
    Path(path).write_text(json.dumps(net.to_dict()))


def load_property(path, base_dir=None):
    """Load a property JSON file into a VerificationProblem."""
    path = Path(path)
    d = json.loads(path.read_text())
    net_path = Path(d["network"])
    if not net_path.is_absolute():
        net_path = Path(base_dir) / net_path if base_dir else path.parent / net_path
    net0 = load_network(net_path)
    meta = {k: v for k, v in d.items() if k not in ("center", "network")}
    meta.setdefault("property_id", path.stem)
    meta["network_path"] = str(net_path)
    meta["center"] = list(map(float, d["center"]))
    return encode_property(net0, d["c"], d["c_prime"], d["center"], d["epsilon"],
                           clamp=d.get("clamp", True), metadata=meta)


def save_property(path, network_path, center, eps, c, c_prime, clamp=True, **extra):
    d = {"network": str(network_path), "center": list(map(float, center)),
         "epsilon": float(eps), "c": int(c), "c_prime": int(c_prime), "clamp": bool(clamp)}
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1))


# --------------------------------------------------------------------------
# synthetic networks

def random_network(sizes, rng, scale=1.0, bias_scale=0.1):
    """Dense ReLU network with He-scaled Gaussian weights; ``sizes`` includes input."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, scale * np.sqrt(2.0 / n_in), size=(n_out, n_in))
        b = rng.normal(0.0, bias_scale, size=n_out)
        layers.append(Layer.dense(w, b))
    return Network(tuple(layers))
