"""Attention-based module selector.

The image representation (max-pooled patch embeddings) and each source's
pre-softmax logits are pushed through two-layer towers ending in a
LayerNorm; the source weights are a softmax over the dot products.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteLossError
from .store import pack_container, selector_param_count, unpack_container, ContainerError

LN_EPS = 1e-5


@dataclass(frozen=True)
class SelectorConfig:
    d: int = 32
    dx: int = 16
    dl: int = 16
    dp: int = 16
    v: int = 10
    dropout_rate: float = 0.0

    def __post_init__(self):
        if min(self.d, self.dx, self.dl, self.dp, self.v) < 1:
            raise ValueError("selector dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class SelectorParams:
    W_dx: np.ndarray
    W_ux: np.ndarray
    W_dl: np.ndarray
    W_ul: np.ndarray
    ln_x_gamma: np.ndarray
    ln_x_beta: np.ndarray
    ln_l_gamma: np.ndarray
    ln_l_beta: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    @classmethod
    def from_dict(cls, d) -> "SelectorParams":
        return cls(**{n: np.array(d[n], dtype=np.float64) for n in cls.names()})

    @property
    def config_dims(self) -> tuple[int, int, int, int, int]:
        d, dx = self.W_dx.shape
        v, dl = self.W_dl.shape
        return d, dx, dl, self.W_ux.shape[1], v

    def param_count(self) -> int:
        return sum(int(a.size) for a in self.as_dict().values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for n in self.names():
            h.update(np.ascontiguousarray(getattr(self, n)).tobytes())
        return h.hexdigest()

    def equals(self, other: "SelectorParams") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in self.names())


def init_selector(cfg: SelectorConfig, seed: int = 0) -> SelectorParams:
    rng = np.random.default_rng(seed)

    def unif(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    params = SelectorParams(
        W_dx=unif(cfg.d, (cfg.d, cfg.dx)),
        W_ux=unif(cfg.dx, (cfg.dx, cfg.dp)),
        W_dl=unif(cfg.v, (cfg.v, cfg.dl)),
        W_ul=unif(cfg.dl, (cfg.dl, cfg.dp)),
        ln_x_gamma=np.ones(cfg.dp),
        ln_x_beta=np.zeros(cfg.dp),
        ln_l_gamma=np.ones(cfg.dp),
        ln_l_beta=np.zeros(cfg.dp),
    )
    assert params.param_count() == selector_param_count(cfg.d, cfg.dx, cfg.dl, cfg.dp, cfg.v)
    return params


# ---------------------------------------------------------------------------
# forward pieces (arrays or Vars)


def _tower(x, W_down, W_up, gamma, beta, dropout=None):
    hidden = ad.relu(ad.apply_linear(x, W_down))
    if dropout is not None:
        if isinstance(hidden, ad.Var):
            hidden = ad.mul(hidden, dropout(hidden.shape))
        else:
            hidden = hidden * dropout(np.shape(hidden))
    return ad.layer_norm(ad.apply_linear(hidden, W_up), gamma, beta, LN_EPS)


def _dropout_fn(rate, rng):
    if not rate or rng is None:
        return None

    def mask(shape):
        return (rng.random(shape) >= rate) / (1.0 - rate)

    return mask


def embed_input(sel, x_hat, dropout_rate: float = 0.0, rng=None):
    """``LN_x(W_ux^T relu(W_dx^T x_hat))``; dropout only when ``rng`` is given."""
    p = sel.as_dict() if isinstance(sel, SelectorParams) else sel
    return _tower(x_hat, p["W_dx"], p["W_ux"], p["ln_x_gamma"], p["ln_x_beta"], _dropout_fn(dropout_rate, rng))


def embed_logits(sel, logits, dropout_rate: float = 0.0, rng=None):
    p = sel.as_dict() if isinstance(sel, SelectorParams) else sel
    return _tower(logits, p["W_dl"], p["W_ul"], p["ln_l_gamma"], p["ln_l_beta"], _dropout_fn(dropout_rate, rng))


def attention_weights(h_x, h_ls) -> np.ndarray:
    """Softmax over ``h_{l,j} . h_x`` for one sample."""
    h_ls = np.asarray(h_ls, dtype=np.float64)
    if h_ls.ndim != 2 or h_ls.shape[0] == 0:
        raise ValueError("attention_weights needs at least one source embedding")
    return ad.softmax(h_ls @ np.asarray(h_x, dtype=np.float64))


def _check_simplex(w, what):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what} must lie on the probability simplex")
    return w


def ensemble_logits(weights, logits) -> np.ndarray:
    w = _check_simplex(weights, "weights")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] != w.size:
        raise ValueError(f"{w.size} weights for {logits.shape[0]} sources")
    return w @ logits


def weighted_pseudo_label(weights, probs) -> np.ndarray:
    w = _check_simplex(weights, "weights")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != w.size:
        raise ValueError(f"{w.size} weights for {probs.shape[0]} sources")
    for row in probs:
        _check_simplex(row, "source pseudo-labels")
    return w @ probs


# ---------------------------------------------------------------------------
# batched


def source_weights(sel, x_hat, logits, dropout_rate: float = 0.0, rng=None):
    """Per-sample weights ``(B, N)`` from ``x_hat (B, d)`` and ``logits (B, N, K)``."""
    h_x = embed_input(sel, x_hat, dropout_rate, rng)
    h_l = embed_logits(sel, logits, dropout_rate, rng)
    if isinstance(h_x, ad.Var) or isinstance(h_l, ad.Var):
        B, dp = np.shape(h_x.data if isinstance(h_x, ad.Var) else h_x)
        scores = ad.sum_(ad.mul(h_l, ad.reshape(h_x, (B, 1, dp))), axis=-1)
        return ad.softmax(scores, axis=-1)
    return ad.softmax(np.einsum("bnd,bd->bn", h_l, h_x), axis=-1)


def _pseudo_labels(weights, probs):
    B, N = weights.shape
    return ad.sum_(ad.mul(ad.reshape(weights, (B, N, 1)), probs), axis=1)


def batch_pseudo_label_entropy(sel, x_hat, logits, dropout_rate: float = 0.0, rng=None):
    """Mean entropy of the weighted pseudo-labels; logits are constants."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] == 0:
        raise ValueError("batch_pseudo_label_entropy needs a non-empty (B, N, K) logit block")
    probs = ad.softmax(logits, axis=-1)
    w = source_weights(sel, x_hat, logits, dropout_rate, rng)
    return ad.mean(ad.entropy(_pseudo_labels(w, probs), axis=-1))


def _grad_step(sel: SelectorParams, loss_fn, lr: float) -> SelectorParams:
    ctx = ad.GradContext()
    watched = {n: ctx.watch(n, a) for n, a in sel.as_dict().items()}
    loss = loss_fn(watched)
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"selector loss became {float(loss.data)}")
    grads = ctx.gradient(loss)
    return SelectorParams.from_dict({n: a - lr * grads[n] for n, a in sel.as_dict().items()})


def tta_update(sel: SelectorParams, x_hat, logits, lr: float = 1e-2, steps: int = 1) -> SelectorParams:
    """Gradient descent on the pseudo-label entropy; ``sel`` is left untouched."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    new = sel
    for _ in range(steps):
        new = _grad_step(new, lambda w: batch_pseudo_label_entropy(w, x_hat, logits), lr)
    return new


def supervised_loss(sel, x_hat, logits, labels, dropout_rate: float = 0.0, rng=None):
    """Cross-entropy of the weighted pseudo-label against ground truth."""
    probs = ad.softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    w = source_weights(sel, x_hat, logits, dropout_rate, rng)
    yhat = _pseudo_labels(w, probs)
    picked = ad.index(yhat, (np.arange(len(labels)), np.asarray(labels)))
    return ad.neg(ad.mean(ad.log(picked, floor=1e-300)))


def init_supervised(sel: SelectorParams, x_hat, logits, labels, lr: float = 0.1, epochs: int = 50,
                    batch_size: int = 64, seed: int = 0, dropout_rate: float = 0.0) -> SelectorParams:
    """Fit the selector on labeled source samples with minibatch SGD."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            sel = _grad_step(
                sel,
                lambda w: supervised_loss(w, x_hat[idx], logits[idx], labels[idx], dropout_rate, rng),
                lr,
            )
    return sel


# ---------------------------------------------------------------------------
# checkpoint


def save_selector(sel: SelectorParams, cfg: SelectorConfig) -> bytes:
    return pack_container({"kind": "selector", "config": cfg.__dict__}, sel.as_dict())


def load_selector(buf: bytes) -> tuple[SelectorParams, SelectorConfig]:
    header, tensors = unpack_container(buf)
    if header.get("kind") != "selector":
        raise ContainerError(f"container holds kind {header.get('kind')!r}, not a selector")
    return SelectorParams.from_dict(tensors), SelectorConfig(**header["config"])
