"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Only the operations the HGNN engine needs are provided. Each op builds a :class:`Tensor`
holding its parents and a closure mapping the upstream gradient to one gradient per
parent. :meth:`Tensor.backward` walks the graph once in reverse topological order.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation forwards."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = x.data <= 0
    out = np.where(neg, alpha * np.expm1(np.minimum(x.data, 0.0)), x.data)
    return _make(out, (x,), lambda g: (np.where(neg, g * (out + alpha), g),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    neg = x.data < 0
    return _make(np.where(neg, slope * x.data, x.data), (x,), lambda g: (np.where(neg, slope * g, g),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- shape and reductions ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def spmm(m: sp.spmatrix, x: Tensor, mt: sp.spmatrix | None = None) -> Tensor:
    """Constant sparse matrix times dense tensor. ``mt`` may carry a precomputed transpose."""
    if mt is None:
        mt = m.T.tocsr()
    return _make(m @ x.data, (x,), lambda g: (mt @ g,))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def max_reduce(x: Tensor, axis: int = 0) -> Tensor:
    """Max along ``axis``; ties share the gradient equally."""
    out = x.data.max(axis=axis)

    def bw(g):
        hit = x.data == np.expand_dims(out, axis)
        share = hit / hit.sum(axis=axis, keepdims=True)
        return (share * np.expand_dims(g, axis),)

    return _make(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# -- graph ops -------------------------------------------------------------------------


class Segments:
    """Grouping of edge rows by target node. Edges must be sorted by target."""

    __slots__ = ("index", "n", "starts", "nonempty", "counts", "incidence")

    def __init__(self, index: np.ndarray, n: int):
        index = np.asarray(index, dtype=np.int64)
        if len(index) > 1 and np.any(np.diff(index) < 0):
            raise ValueError("segment index must be sorted")
        self.index = index
        self.n = n
        self.counts = np.bincount(index, minlength=n)
        self.nonempty = np.flatnonzero(self.counts)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])[self.nonempty]
        m = len(index)
        self.incidence = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    n = x.shape[0]

    def bw(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    return _make(seg.incidence @ x.data, (x,), lambda g: (g[seg.index],))


def segment_max(x: Tensor, seg: Segments) -> Tensor:
    """Per-target max over edge rows; targets with no edges get zeros. Ties share gradient."""
    out = np.zeros((seg.n,) + x.shape[1:])
    if len(seg.index):
        out[seg.nonempty] = np.maximum.reduceat(x.data, seg.starts, axis=0)

    def bw(g):
        hit = (x.data == out[seg.index]).astype(np.float64)
        ties = seg.incidence @ hit
        ties[ties == 0] = 1.0
        return (hit * (g / ties)[seg.index],)

    return _make(out, (x,), bw)


def segment_softmax(x: Tensor, seg: Segments) -> Tensor:
    """Softmax of a 1-D edge score vector within each target's segment."""
    if not len(seg.index):
        return _make(np.zeros(0), (x,), lambda g: (g,))
    top = np.maximum.reduceat(x.data, seg.starts)
    full_top = np.zeros(seg.n)
    full_top[seg.nonempty] = top
    e = np.exp(x.data - full_top[seg.index])
    den = seg.incidence @ e
    out = e / den[seg.index]

    def bw(g):
        dot = seg.incidence @ (g * out)
        return (out * (g - dot[seg.index]),)

    return _make(out, (x,), bw)


# -- losses ------------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(loss, (logits,), bw)


def bce_with_logits(scores: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(scores) against 0/1 ``targets``."""
    s = scores.data
    loss = (np.maximum(s, 0) - s * targets + np.log1p(np.exp(-np.abs(s)))).mean()
    n = s.size

    def bw(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * s))
        return (g * (p - targets) / n,)

    return _make(loss, (scores,), bw)


# -- optimisation ------------------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.005, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
