"""Minimal reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes the
output gradient back to them. ``backward`` walks the graph in reverse
topological order. Only the handful of ops the networks in this package
need are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")
    # make ``ndarray * Tensor`` dispatch to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every ancestor."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def relu(x):
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))

    def backward(g):
        x._accumulate(g * mask)

    out._backward = backward
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    out._backward = backward
    return out


def take(x, index):
    """Row gather ``x[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    out = Tensor(x.data[index], (x,))

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    out._backward = backward
    return out


def segment_max(x, starts):
    """Row-wise max over contiguous row segments beginning at ``starts``."""
    starts = np.asarray(starts, dtype=np.intp)
    n = x.data.shape[0]
    ends = np.append(starts[1:], n)
    first = np.empty((len(starts), x.data.shape[1]), dtype=np.intp)
    for k, (s, e) in enumerate(zip(starts, ends)):
        first[k] = s + np.argmax(x.data[s:e], axis=0)
    cols = np.broadcast_to(np.arange(x.data.shape[1]), first.shape)
    values = x.data[first, cols]
    out = Tensor(values, (x,))

    def backward(g):
        full = np.zeros_like(x.data)
        full[first, cols] = g
        x._accumulate(full)

    out._backward = backward
    return out


def segment_mean(x, starts):
    starts = np.asarray(starts, dtype=np.intp)
    n = x.data.shape[0]
    counts = np.diff(np.append(starts, n))
    values = np.add.reduceat(x.data, starts, axis=0) / counts[:, None]
    out = Tensor(values, (x,))

    def backward(g):
        x._accumulate(np.repeat(g / counts[:, None], counts, axis=0))

    out._backward = backward
    return out


def scatter_mean(x, index, n_out):
    """Mean of rows of ``x`` grouped by ``index``; empty groups give zeros."""
    index = np.asarray(index, dtype=np.intp)
    counts = np.bincount(index, minlength=n_out).astype(float)
    safe = np.maximum(counts, 1.0)
    total = np.zeros((n_out,) + x.data.shape[1:])
    np.add.at(total, index, x.data)
    out = Tensor(total / safe[:, None], (x,))

    def backward(g):
        x._accumulate((g / safe[:, None])[index])

    out._backward = backward
    return out


def row_sum(x):
    out = Tensor(x.data.sum(axis=-1), (x,))

    def backward(g):
        x._accumulate(np.broadcast_to(g[..., None], x.data.shape))

    out._backward = backward
    return out


def total(x):
    out = Tensor(x.data.sum(), (x,))

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    out._backward = backward
    return out


def row_norm(x):
    """Euclidean norm of each row; the subgradient at zero is taken as 0."""
    n = np.sqrt((x.data ** 2).sum(axis=-1))
    out = Tensor(n, (x,))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        x._accumulate(np.where((n > 0)[..., None], x.data * (g / safe)[..., None], 0.0))

    out._backward = backward
    return out


def l2_normalize(x, eps=1e-8):
    length = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    n = length + eps
    y = x.data / n
    out = Tensor(y, (x,))

    def backward(g):
        xg = (x.data * g).sum(axis=-1, keepdims=True)
        safe = np.maximum(length, 1e-300)
        x._accumulate(g / n - x.data * xg / (safe * n * n))

    out._backward = backward
    return out


def cross(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.cross(a.data, b.data), (a, b))

    def backward(g):
        # d(a x b) . g  =  a . (b x g)  =  b . (g x a)
        a._accumulate(_unbroadcast(np.cross(b.data, g), a.data.shape))
        b._accumulate(_unbroadcast(np.cross(g, a.data), b.data.shape))

    out._backward = backward
    return out


def log_softmax(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y, (x,))

    def backward(g):
        soft = np.exp(y)
        x._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def pick(x, index):
    """``x[i, index[i]]`` for every row i."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, index], (x,))

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        x._accumulate(full)

    out._backward = backward
    return out


def softplus(x):
    d = x.data
    y = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    out = Tensor(y, (x,))

    def backward(g):
        x._accumulate(g / (1.0 + np.exp(-d)))

    out._backward = backward
    return out


def softmax(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (x,))

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = backward
    return out
