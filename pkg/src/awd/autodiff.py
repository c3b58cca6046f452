"""Reverse-mode autodiff over dense numpy tensors.

Define-by-run tape: every op returns a Tensor that remembers its parents
and a closure that scatters the upstream gradient back to them. backward()
walks the tape once in reverse topological order.

Two non-standard nodes are included: reverse_grad (identity forward,
negated gradient backward) and straight_through (discrete forward value,
gradient routed to a differentiable surrogate).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf; carries the offending op name."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "is_param", "name")

    def __init__(self, data, parents=(), backward=None, is_param=False,
                 name=None, op="leaf", dtype=None):
        if isinstance(data, np.generic):
            # numpy ops on 0-d arrays hand back scalars; keep their dtype
            # instead of quantizing to the default (matters for float64 runs).
            data = np.asarray(data, dtype=dtype)
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        elif dtype is not None and data.dtype != dtype:
            data = data.astype(dtype)
        self.data = _check_finite(data, name or op)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode accumulation seeded from this scalar node."""
        if self.data.size != 1:
            raise ValueError("backward seed must be a scalar node")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, param={self.is_param}, name={self.name})"


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    out = Tensor(a.data + b.data, (a, b), op="add")
    out._backward = lambda g: (a._accumulate(_unbroadcast(g, a.shape)),
                               b._accumulate(_unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _lift(b, a)
    out = Tensor(a.data - b.data, (a, b), op="sub")
    out._backward = lambda g: (a._accumulate(_unbroadcast(g, a.shape)),
                               b._accumulate(_unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(b.dtype.type(a))
    b = _lift(b, a)
    out = Tensor(a.data * b.data, (a, b), op="mul")
    out._backward = lambda g: (a._accumulate(_unbroadcast(g * b.data, a.shape)),
                               b._accumulate(_unbroadcast(g * a.data, b.shape)))
    return out


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(b.dtype.type(a))
    b = _lift(b, a)
    out = Tensor(a.data / b.data, (a, b), op="div")

    def back(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = back
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,), op="neg")
    out._backward = lambda g: a._accumulate(-g)
    return out


# linear algebra -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data, (a, b), op="matmul")
    out._backward = lambda g: (a._accumulate(g @ b.data.T),
                               b._accumulate(a.data.T @ g))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = back
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 tuple(tensors), op="stack")

    def back(g):
        for t, piece in zip(tensors, np.moveaxis(g, axis, 0)):
            t._accumulate(piece)

    out._backward = back
    return out


def _basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis
               for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], (a,), op="slice")
    basic = _basic_index(key)  # basic indexing never aliases, so += is safe

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if basic:
            a.grad[key] += g
        else:
            np.add.at(a.grad, key, g)

    out._backward = back
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,), op="reshape")
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,), op="broadcast")
    out._backward = lambda g: a._accumulate(_unbroadcast(g, a.shape))
    return out


def gather_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: rows of a (V, E) table selected by integer ids."""
    idx = np.asarray(idx)
    out = Tensor(table.data[idx], (table,), op="gather")

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1),
                  g.reshape(-1, table.data.shape[1]))

    out._backward = back
    return out


def take_along_last(a: Tensor, idx) -> Tensor:
    """Pick one entry along the last axis per leading index."""
    idx = np.asarray(idx)
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    out = Tensor(picked, (a,), op="take")

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        flat = a.grad.reshape(-1, a.data.shape[-1])
        rows = np.arange(flat.shape[0])
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))

    out._backward = back
    return out


# nonlinearities -----------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, (a,), op="sigmoid")
    out._backward = lambda g: a._accumulate(g * y * (1.0 - y))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, (a,), op="tanh")
    out._backward = lambda g: a._accumulate(g * (1.0 - y * y))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, (a,), op="exp")
    out._backward = lambda g: a._accumulate(g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,), op="log")
    out._backward = lambda g: a._accumulate(g / a.data)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (a,), op="softmax")

    def back(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - inner))

    out._backward = back
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, (a,), op="log_softmax")

    def back(g):
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backward = back
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes through only inside [lo, hi]."""
    y = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    out = Tensor(y, (a,), op="clip")
    out._backward = lambda g: a._accumulate(g * mask)
    return out


# reductions ---------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
                 (a,), op="sum")

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = back
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)),
                 (a,), op="mean")

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / n)

    out._backward = back
    return out


# estimator nodes ----------------------------------------------------

def reverse_grad(a: Tensor) -> Tensor:
    """Identity forward, negated gradient backward."""
    out = Tensor(a.data.copy(), (a,), op="reverse_grad")
    out._backward = lambda g: a._accumulate(-g)
    return out


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value is `hard`; gradient flows as if the value were `soft`."""
    hard_data = hard.data if isinstance(hard, Tensor) else np.asarray(hard, dtype=soft.dtype)
    if hard_data.shape != soft.shape:
        raise ValueError(f"straight_through dim mismatch {hard_data.shape} vs {soft.shape}")
    out = Tensor(hard_data.astype(soft.dtype, copy=True), (soft,), op="straight_through")
    out._backward = lambda g: soft._accumulate(g)
    return out


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# validation harness -------------------------------------------------

def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn(params) -> scalar Tensor` must be deterministic and rebuild the
    graph from the current parameter data on every call.
    """
    for p in params:
        p.zero_grad()
    fn(params).backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(params).item()
            flat[i] = orig - eps
            lo = fn(params).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
