"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the operations the GNN needs are provided. Nodes are recorded in
creation order, so a reverse sweep of the tape is a valid topological order.
"""
from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "_backward")

    def __init__(self, value, backward=None):
        self.value = value
        self.grad = None
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape


def _val(x):
    return x.value if isinstance(x, Node) else x


class Tape:
    def __init__(self):
        self.nodes = []

    def leaf(self, value):
        n = Node(np.asarray(value, dtype=float))
        self.nodes.append(n)
        return n

    def _push(self, value, backward):
        n = Node(value, backward)
        self.nodes.append(n)
        return n

    @staticmethod
    def _acc(x, g):
        if isinstance(x, Node):
            x.grad = g if x.grad is None else x.grad + g

    # -- ops ---------------------------------------------------------------

    def matmul(self, a, w):
        av, wv = _val(a), _val(w)

        def back(g):
            self._acc(a, g @ wv.T)
            self._acc(w, av.T @ g)
        return self._push(av @ wv, back)

    def add_bias(self, a, b):
        def back(g):
            self._acc(a, g)
            self._acc(b, g.sum(axis=0))
        return self._push(_val(a) + _val(b), back)

    def add(self, a, b):
        def back(g):
            self._acc(a, g)
            self._acc(b, g)
        return self._push(_val(a) + _val(b), back)

    def sub(self, a, b):
        def back(g):
            self._acc(a, g)
            self._acc(b, -g)
        return self._push(_val(a) - _val(b), back)

    def relu(self, a):
        av = _val(a)
        mask = av > 0

        def back(g):
            self._acc(a, g * mask)
        return self._push(np.where(mask, av, 0.0), back)

    def scale(self, a, c):
        """Multiply by a constant array (broadcast)."""
        def back(g):
            self._acc(a, g * c)
        return self._push(_val(a) * c, back)

    def concat(self, parts):
        vals = [_val(p) for p in parts]
        edges = np.cumsum([0] + [v.shape[1] for v in vals])

        def back(g):
            for p, s, e in zip(parts, edges[:-1], edges[1:]):
                self._acc(p, g[:, s:e])
        return self._push(np.concatenate(vals, axis=1), back)

    def linear(self, a, fn, fn_t):
        """Apply a constant linear operator ``fn`` with adjoint ``fn_t``."""
        def back(g):
            self._acc(a, fn_t(g))
        return self._push(fn(_val(a)), back)

    def rows(self, a, idx):
        av = _val(a)

        def back(g):
            full = np.zeros_like(av)
            np.add.at(full, idx, g)
            self._acc(a, full)
        return self._push(av[idx], back)

    def vstack(self, parts):
        vals = [_val(p) for p in parts]
        edges = np.cumsum([0] + [v.shape[0] for v in vals])

        def back(g):
            for p, s, e in zip(parts, edges[:-1], edges[1:]):
                self._acc(p, g[s:e])
        return self._push(np.concatenate(vals, axis=0), back)

    def pairwise_hinge(self, s, better):
        """Mean of (1 - (s_j - s_i))_+ over pairs with ``better[i, j]`` true."""
        sv = _val(s).reshape(-1)
        k = int(better.sum())
        if k == 0:
            return self._push(np.array(0.0), lambda g: None)
        margin = 1.0 - (sv[None, :] - sv[:, None])
        active = better & (margin > 0)
        # np.maximum keeps NaN so divergence is visible to the caller
        loss = float(np.maximum(margin, 0.0)[better].sum() / k)

        def back(g):
            w = active.astype(float) * (float(g) / k)
            gs = w.sum(axis=1) - w.sum(axis=0)
            self._acc(s, gs.reshape(_val(s).shape))
        return self._push(np.array(loss), back)

    def pick(self, a, i):
        """Scalar element ``i`` of a flattened node."""
        av = _val(a)

        def back(g):
            full = np.zeros(av.size)
            full[i] = float(g)
            self._acc(a, full.reshape(av.shape))
        return self._push(np.array(av.reshape(-1)[i]), back)

    # -- sweep -------------------------------------------------------------

    def backward(self, out):
        out.grad = np.ones_like(out.value)
        for n in reversed(self.nodes):
            if n.grad is not None and n._backward is not None:
                n._backward(n.grad)
