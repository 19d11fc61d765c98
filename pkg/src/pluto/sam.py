"""Sharpness-aware entropy minimisation over LayerNorm affine parameters.

The LN pairs of one source model are treated as a single flat vector in
``LnState.flat()`` order; the perturbation and the step live in that space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteLossError
from .vit import LnState, VitParams, _check_module, logits_graph
from .store import ModuleRecord


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    entropy_factor: float = 0.4
    lr: float = 1e-3

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not 0 < self.entropy_factor <= 1:
            raise ValueError("entropy_factor must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def threshold(self, num_classes: int) -> float:
        return self.entropy_factor * math.log(num_classes)


@dataclass
class SamStepReport:
    entropies: list[float] = field(default_factory=list)
    filtered: list[bool] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    threshold: float = float("nan")

    @property
    def updated(self) -> int:
        return sum(not f for f in self.filtered)


def _sample_entropies(params: VitParams, module: ModuleRecord | None, ln: LnState, images):
    cfg = params.cfg
    kind, payload, head = (None, None, None) if module is None else (
        module.kind, module.payload, (module.head_weight, module.head_bias))
    return ad.entropy_from_logits(logits_graph(cfg, params.weights, ln.pairs, images, kind, payload, head)).data


def _loss_and_grad(params: VitParams, module: ModuleRecord | None, ln: LnState, images):
    """Mean prediction entropy over ``images`` and its gradient w.r.t. the flat LN vector."""
    cfg = params.cfg
    if module is not None:
        _check_module(cfg, module)
    ctx = ad.GradContext()
    pairs = [(ctx.watch(f"g{i}", g), ctx.watch(f"b{i}", b)) for i, (g, b) in enumerate(ln.pairs)]
    kind, payload, head = (None, None, None) if module is None else (
        module.kind, module.payload, (module.head_weight, module.head_bias))
    logits = logits_graph(cfg, params.weights, pairs, images, kind, payload, head)
    loss = ad.mean(ad.entropy_from_logits(logits))
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLossError(f"LN entropy became {value}")
    grads = ctx.gradient(loss)
    flat = np.concatenate([np.concatenate([grads[f"g{i}"], grads[f"b{i}"]]) for i in range(len(ln))])
    if not np.all(np.isfinite(flat)):
        raise NonFiniteLossError("LN entropy gradient is not finite")
    return value, flat


def source_batch_entropy(params: VitParams, module: ModuleRecord | None, ln: LnState, images) -> float:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("source_batch_entropy needs a non-empty batch of images")
    return float(np.mean(_sample_entropies(params, module, ln, images)))


def entropy_gradient(params: VitParams, module: ModuleRecord | None, ln: LnState, images) -> np.ndarray:
    return _loss_and_grad(params, module, ln, np.asarray(images, dtype=np.float64))[1]


def epsilon_star(v, rho: float) -> np.ndarray:
    """Worst-case first-order perturbation on the radius-``rho`` ball."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    return rho * np.sign(v) * np.abs(v) / norm


def _sam(params, module, ln: LnState, images, rho: float):
    _, v = _loss_and_grad(params, module, ln, images)
    eps = epsilon_star(v, rho)
    _, g = _loss_and_grad(params, module, ln.with_flat(ln.flat() + eps), images)
    return v, g


def sam_gradient(params: VitParams, module: ModuleRecord | None, ln: LnState, images, rho: float) -> np.ndarray:
    """Entropy gradient evaluated at the perturbed point ``ln + eps*(ln)``."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("sam_gradient needs a non-empty batch")
    return _sam(params, module, ln, images, rho)[1]


def filtered_sam_step(params: VitParams, module: ModuleRecord | None, ln: LnState, images,
                      cfg: SamConfig = SamConfig()) -> tuple[LnState, SamStepReport]:
    """Per-sample sequential updates, skipping samples above the entropy threshold."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("filtered_sam_step needs a non-empty batch")
    report = SamStepReport(threshold=cfg.threshold(params.cfg.num_classes))
    current = ln
    for x in images:
        x = x[None]
        e = float(_sample_entropies(params, module, current, x)[0])
        if not math.isfinite(e):
            raise NonFiniteLossError("sample entropy is not finite")
        report.entropies.append(e)
        skip = e > report.threshold
        report.filtered.append(skip)
        if skip:
            continue
        v, g = _sam(params, module, current, x, cfg.rho)
        report.grad_norms.append(float(np.linalg.norm(v)))
        step = cfg.lr * g
        report.step_norms.append(float(np.linalg.norm(step)))
        if cfg.lr:
            current = current.with_flat(current.flat() - step)
    return current, report


def batch_sam_step(params: VitParams, module: ModuleRecord | None, ln: LnState, images,
                   cfg: SamConfig = SamConfig(), report: SamStepReport | None = None) -> LnState:
    """One sharpness-aware step on the mean entropy of the low-entropy samples."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("batch_sam_step needs a non-empty batch")
    thr = cfg.threshold(params.cfg.num_classes)
    ent = _sample_entropies(params, module, ln, images)
    if not np.all(np.isfinite(ent)):
        raise NonFiniteLossError("sample entropy is not finite")
    keep = ent <= thr
    if report is not None:
        report.threshold = thr
        report.entropies.extend(float(e) for e in ent)
        report.filtered.extend(bool(not k) for k in keep)
    if not keep.any() or cfg.lr == 0:
        return ln
    v, g = _sam(params, module, ln, images[keep], cfg.rho)
    step = cfg.lr * g
    if report is not None:
        report.grad_norms.append(float(np.linalg.norm(v)))
        report.step_norms.append(float(np.linalg.norm(step)))
    return ln.with_flat(ln.flat() - step)


def plain_entropy_step(params: VitParams, module: ModuleRecord | None, ln: LnState, images, lr: float) -> LnState:
    """Unfiltered, unperturbed gradient step on the batch entropy."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("plain_entropy_step needs a non-empty batch")
    if lr == 0:
        return ln
    _, g = _loss_and_grad(params, module, ln, images)
    return ln.with_flat(ln.flat() - lr * g)
