"""Dense float64 kernels with a small reverse-mode differentiation engine.

Plain ``numpy.ndarray`` (float64) is the value type everywhere.  ``Var`` wraps
an array and, when any input is watched by a :class:`GradContext`, records the
backward closure needed to push gradients to its parents.  Forward passes
that touch no watched value build no graph at all.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class Var:
    __slots__ = ("data", "parents", "backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, (1, 0))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Var(data, parents, backward, True)
    return Var(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _node(out, (a, b), backward)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a, floor: float = 0.0) -> Var:
    """Natural log; with ``floor > 0`` the input is clamped from below first."""
    a = as_var(a)
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Var:
    a = as_var(a)
    return _node(a.data**2, (a,), lambda g: (2.0 * g * a.data,))


def relu(x):
    """Elementwise ``max(0, x)``; arrays in, arrays out."""
    if not isinstance(x, Var):
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Var:
    # tanh approximation
    a = as_var(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _node(out, (a,), backward)


def xlogx(a) -> Var:
    """``x ln x`` with ``0 ln 0 = 0``.  Gradient uses a floored log."""
    a = as_var(a)
    x = a.data
    safe = np.where(x > 0, x, 1.0)
    out = np.where(x > 0, x * np.log(safe), 0.0)
    out = np.where(np.isnan(x), np.nan, out)  # keep NaN visible to callers
    return _node(out, (a,), lambda g: (g * (np.log(np.maximum(x, 1e-300)) + 1.0),))


# ---------------------------------------------------------------------------
# shape and reductions


def sum_(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Var:
    a = as_var(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def max_axis(a, axis: int) -> Var:
    """Maximum along ``axis``; ties route the gradient to the first maximiser."""
    a = as_var(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node(a.data @ b.data, (a, b), backward)


def apply_linear(x, W, b=None):
    """``x @ W (+ b)`` with ``b`` broadcast over rows."""
    xs, ws = np.shape(x.data if isinstance(x, Var) else x), np.shape(W.data if isinstance(W, Var) else W)
    if len(ws) != 2 or xs[-1] != ws[0]:
        raise DimensionError(f"cannot apply linear map of shape {ws} to input of shape {xs}")
    if b is not None:
        bs = np.shape(b.data if isinstance(b, Var) else b)
        if bs != (ws[1],):
            raise DimensionError(f"bias shape {bs} does not match output width {ws[1]}")
    if not any(isinstance(t, Var) for t in (x, W, b)):
        out = np.asarray(x, dtype=np.float64) @ np.asarray(W, dtype=np.float64)
        return out if b is None else out + np.asarray(b, dtype=np.float64)
    out = matmul(x, W)
    return out if b is None else add(out, b)


def softmax(z, axis: int = -1):
    """Max-shifted softmax along ``axis``; arrays in, arrays out."""
    if not isinstance(z, Var):
        z = np.asarray(z, dtype=np.float64)
        if z.size == 0 or z.shape[axis] == 0:
            raise ValueError("softmax of an empty vector")
        e = np.exp(z - z.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    out = softmax(z.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (z,), backward)


def log_softmax(z, axis: int = -1) -> Var:
    z = as_var(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (z,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalise the last axis with population variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv, gv, bv = (t.data if isinstance(t, Var) else np.asarray(t, dtype=np.float64) for t in (x, gamma, beta))
    d = xv.shape[-1] if xv.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty vector")
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gv.shape}, {bv.shape} do not match width {d}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    if not any(isinstance(t, Var) for t in (x, gamma, beta)):
        return out
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gv
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def max_pool_rows(X):
    """Columnwise maximum of an ``e x d`` sequence (or ``... x e x d`` batch)."""
    data = X.data if isinstance(X, Var) else np.asarray(X, dtype=np.float64)
    if data.ndim < 2 or data.shape[-2] == 0:
        raise DimensionError(f"max_pool_rows needs a non-empty sequence, got shape {data.shape}")
    if isinstance(X, Var):
        return max_axis(X, axis=-2)
    return data.max(axis=-2)


def shannon_entropy(p) -> float:
    """Entropy in nats of a probability vector, with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError(f"expected a non-empty probability vector, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("probability vector has a negative entry")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probability vector sums to {p.sum():.9g}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy(p, axis: int = -1) -> Var:
    """Differentiable entropy of probability rows."""
    return neg(sum_(xlogx(p), axis=axis))


def entropy_from_logits(z, axis: int = -1) -> Var:
    z = as_var(z)
    return neg(sum_(mul(softmax(z, axis), log_softmax(z, axis)), axis=axis))


# ---------------------------------------------------------------------------
# gradient machinery


class GradContext:
    """Names the leaves to differentiate with respect to.

    >>> ctx = GradContext()
    >>> lam = ctx.watch("lam", 3.0)
    >>> ctx.gradient(lam * lam)["lam"]
    array(6.)
    """

    def __init__(self):
        self.watched: dict[str, Var] = {}

    def watch(self, name: str, value) -> Var:
        if name in self.watched:
            raise KeyError(f"parameter {name!r} already watched")
        v = Var(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self.watched[name] = v
        return v

    def gradient(self, loss: Var, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        if not isinstance(loss, Var) or loss.data.size != 1:
            raise ValueError("loss must be a scalar Var")
        names = list(self.watched) if names is None else list(names)
        for n in names:
            if n not in self.watched:
                raise KeyError(f"parameter {n!r} is not watched")
        grads = backprop(loss)
        return {n: grads.get(id(self.watched[n]), np.zeros_like(self.watched[n].data)) for n in names}


def backprop(loss: Var) -> dict[int, np.ndarray]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.asarray(pg, dtype=np.float64)
    return grads


def gradient(ctx: GradContext, loss: Var, names=None) -> dict[str, np.ndarray]:
    return ctx.gradient(loss, names)


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    grad = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(theta))
        flat[i] = old - h
        fm = float(f(theta))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad
