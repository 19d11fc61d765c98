"""Streaming multi-source test-time adaptation.

For every unlabeled batch: run all source models, weight them per sample
with the selector, adapt the selector on the batch's pseudo-label entropy,
keep the top-M sources by batch-average weight, predict, and finally take
one sharpness-aware LN step on the most-weighted source.  The LN change is
only visible from the next batch on.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteLossError
from .sam import SamConfig, SamStepReport, batch_sam_step, plain_entropy_step
from .selector import SelectorParams, source_weights, tta_update
from .store import ModuleRecord
from .vit import LnState, VitParams, evaluate, forward_batch, patch_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    top_m: int = 4
    batch_size: int = 32
    shots: int = 32
    selector_lr: float = 0.1
    selector_steps: int = 1
    sam: SamConfig = SamConfig()
    ln_update: str = "argmax"  # "argmax" (one source) or "top_m" (every selected source)

    def __post_init__(self):
        if self.top_m < 1:
            raise ValueError("top_m must be >= 1")
        if not 0 <= self.shots:
            raise ValueError("shots must be >= 0")
        if self.ln_update not in ("argmax", "top_m"):
            raise ValueError(f"unknown ln_update mode {self.ln_update!r}")

    @property
    def zero_shot(self) -> bool:
        return self.shots == 0


@dataclass(frozen=True)
class EngineState:
    backbone: VitParams
    modules: tuple[ModuleRecord, ...]
    selector: SelectorParams
    lns: tuple[LnState, ...]

    @classmethod
    def create(cls, backbone: VitParams, modules, selector: SelectorParams) -> "EngineState":
        modules = tuple(modules)
        if not modules:
            raise ValueError("at least one source module is required")
        return cls(backbone, modules, selector, tuple(backbone.ln.copy() for _ in modules))

    @property
    def n_sources(self) -> int:
        return len(self.modules)

    def digests(self) -> dict[str, str]:
        out = {"backbone": self.backbone.backbone_digest(), "selector": self.selector.digest()}
        for j, (m, ln) in enumerate(zip(self.modules, self.lns)):
            h = hashlib.sha256()
            for n in sorted(m.payload):
                h.update(np.ascontiguousarray(m.payload[n]).tobytes())
            h.update(m.head_weight.tobytes() + m.head_bias.tobytes())
            out[f"module{j}"] = h.hexdigest()
            out[f"ln{j}"] = ln.digest()
        return out


@dataclass(frozen=True)
class WeightReport:
    per_sample_weights: np.ndarray  # (B, N) after the selector update
    batch_avg: np.ndarray  # (N,)
    selected: tuple[int, ...]
    rescaled: np.ndarray  # (M,)
    ln_target: int
    initial_weights: np.ndarray  # (B, N) before the selector update
    ln_updated: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "batch_avg": self.batch_avg.tolist(),
            "selected": list(self.selected),
            "rescaled": self.rescaled.tolist(),
            "ln_target": self.ln_target,
            "ln_updated": list(self.ln_updated),
            "per_sample_weights": self.per_sample_weights.tolist(),
        }


@dataclass(frozen=True)
class BatchOutput:
    labels: np.ndarray
    probs: np.ndarray
    report: WeightReport | None
    sam_report: SamStepReport | None = None


@dataclass
class StreamMetrics:
    accuracy: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    selected_counts: np.ndarray | None = None
    weight_sums: np.ndarray | None = None
    ln_target_counts: np.ndarray | None = None
    failed_batches: list[int] = field(default_factory=list)
    wall_clock: float = 0.0
    correct: int = 0
    total: int = 0
    records: list[dict] = field(default_factory=list)
    final_state: EngineState | None = None

    @property
    def mean_accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def summary(self) -> dict:
        return {
            "accuracy": self.mean_accuracy,
            "batches": len(self.accuracy),
            "failed_batches": list(self.failed_batches),
            "selected_counts": None if self.selected_counts is None else self.selected_counts.tolist(),
            "ln_target_counts": None if self.ln_target_counts is None else self.ln_target_counts.tolist(),
        }


# ---------------------------------------------------------------------------
# pieces


def top_m_select(batch_avg, m: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Indices of the ``m`` largest weights (smaller index wins ties) and their rescaling."""
    w = np.asarray(batch_avg, dtype=np.float64)
    if not 1 <= m <= w.size:
        raise ValueError(f"top-M size {m} outside 1..{w.size}")
    order = sorted(range(w.size), key=lambda j: (-w[j], j))[:m]
    sel = w[order]
    return tuple(order), sel / sel.sum()


def image_representation(backbone: VitParams, images) -> np.ndarray:
    """Max-pooled patch embeddings, ``(B, d)``."""
    return ad.max_pool_rows(patch_tokens(backbone.weights, images, backbone.cfg))


def source_logits(state: EngineState, images) -> np.ndarray:
    """``(B, N, K)`` pre-softmax logits of every source under its current LN state."""
    per = [forward_batch(state.backbone, m, images, ln) for m, ln in zip(state.modules, state.lns)]
    return np.stack(per, axis=1)


def _ensemble(weights: np.ndarray, logits: np.ndarray, selected) -> np.ndarray:
    N = logits.shape[1]
    if len(selected) == N:
        return np.einsum("bn,bnk->bk", weights, logits)
    idx = np.sort(np.asarray(selected))
    w = weights[:, idx]
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("bn,bnk->bk", w, logits[:, idx])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteLossError("non-finite values in batch computation")


def process_batch(state: EngineState, batch, cfg: EngineConfig) -> tuple[BatchOutput, EngineState]:
    """One pass of the adaptation loop.  ``state`` is never mutated."""
    images = np.asarray(batch, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("process_batch needs a non-empty (B, H, W, C) batch")
    N = state.n_sources
    if cfg.top_m > N:
        raise ValueError(f"top_m={cfg.top_m} exceeds the {N} available sources")
    U = min(cfg.shots, len(images))

    logits = source_logits(state, images)
    x_hat = image_representation(state.backbone, images)
    _check_finite(logits, x_hat)
    w0 = source_weights(state.selector, x_hat, logits)

    selector = state.selector
    if U > 0:
        selector = tta_update(selector, x_hat[:U], logits[:U], cfg.selector_lr, cfg.selector_steps)
        w = source_weights(selector, x_hat, logits)
    else:
        w = w0
    _check_finite(w)

    batch_avg = w.mean(axis=0)
    selected, rescaled = top_m_select(batch_avg, cfg.top_m)
    ln_target = selected[0]

    ens = _ensemble(w, logits, selected)
    probs = ad.softmax(ens, axis=-1)
    preds = np.argmax(probs, axis=1)

    lns = list(state.lns)
    updated: tuple[int, ...] = ()
    sam_report = None
    if U > 0:
        targets = (ln_target,) if cfg.ln_update == "argmax" else tuple(sorted(selected))
        sam_report = SamStepReport()
        for j in targets:
            lns[j] = batch_sam_step(state.backbone, state.modules[j], lns[j], images[:U], cfg.sam, sam_report)
            _check_finite(lns[j].flat())
        updated = targets

    report = WeightReport(w, batch_avg, selected, rescaled, ln_target, w0, updated)
    new_state = replace(state, selector=selector, lns=tuple(lns))
    return BatchOutput(preds, probs, report, sam_report), new_state


def _mean_entropy(probs: np.ndarray) -> float:
    return float(ad.entropy(probs, axis=-1).data.mean())


def _record(t: int, out: BatchOutput, acc: float | None, ent: float) -> dict:
    rec = {"batch": t, "accuracy": acc, "mean_entropy": ent}
    if out.report is not None:
        rec.update(out.report.to_json())
    return rec


def run_stream(state: EngineState, batches, cfg: EngineConfig, labels=None, results_file=None) -> StreamMetrics:
    """Process ``batches`` in order.  Labels only feed the metrics."""
    batches = list(batches)
    if not batches:
        raise ValueError("stream is empty")
    if labels is not None and len(labels) != len(batches):
        raise ValueError("one label array per batch is required")
    N = state.n_sources
    m = StreamMetrics(selected_counts=np.zeros(N, dtype=np.int64), weight_sums=np.zeros(N),
                      ln_target_counts=np.zeros(N, dtype=np.int64))
    start = time.perf_counter()
    for t, batch in enumerate(batches):
        try:
            out, state = process_batch(state, batch, cfg)
        except NonFiniteLossError as exc:
            logger.warning("batch %d aborted, state rolled back: %s", t, exc)
            m.failed_batches.append(t)
            continue
        rep = out.report
        m.selected_counts[list(rep.selected)] += 1
        m.weight_sums += rep.batch_avg
        m.ln_target_counts[rep.ln_target] += 1
        acc = None
        if labels is not None:
            hits = int(np.sum(out.labels == np.asarray(labels[t])))
            m.correct += hits
            m.total += len(out.labels)
            acc = hits / len(out.labels)
            m.accuracy.append(acc)
        ent = _mean_entropy(out.probs)
        m.entropy.append(ent)
        rec = _record(t, out, acc, ent)
        m.records.append(rec)
        if results_file is not None:
            results_file.write(json.dumps(rec) + "\n")
    m.wall_clock = time.perf_counter() - start
    m.final_state = state
    return m


def uniform_ensemble_baseline(state: EngineState, batches, cfg: EngineConfig, labels=None,
                              ln_update: bool = True) -> StreamMetrics:
    """Equal-weight logit averaging; optionally a plain entropy LN step on every source per batch."""
    batches = list(batches)
    if not batches:
        raise ValueError("stream is empty")
    N = state.n_sources
    m = StreamMetrics()
    start = time.perf_counter()
    for t, batch in enumerate(batches):
        images = np.asarray(batch, dtype=np.float64)
        logits = source_logits(state, images)
        probs = ad.softmax(logits.mean(axis=1), axis=-1)
        preds = np.argmax(probs, axis=1)
        U = min(cfg.shots, len(images))
        if ln_update and U > 0:
            lns = tuple(
                plain_entropy_step(state.backbone, mod, ln, images[:U], cfg.sam.lr)
                for mod, ln in zip(state.modules, state.lns)
            )
            state = replace(state, lns=lns)
        acc = None
        if labels is not None:
            hits = int(np.sum(preds == np.asarray(labels[t])))
            m.correct += hits
            m.total += len(preds)
            acc = hits / len(preds)
            m.accuracy.append(acc)
        ent = _mean_entropy(probs)
        m.entropy.append(ent)
        m.records.append({"batch": t, "accuracy": acc, "mean_entropy": ent, "weights": [1.0 / N] * N})
    m.wall_clock = time.perf_counter() - start
    m.final_state = state
    return m


def single_source_accuracy(state: EngineState, j: int, batches, labels) -> float:
    """Accuracy of source ``j`` alone (no adaptation) over a labeled stream."""
    correct = total = 0
    for batch, y in zip(batches, labels):
        pred = np.argmax(forward_batch(state.backbone, state.modules[j], batch, state.lns[j]), axis=1)
        correct += int(np.sum(pred == np.asarray(y)))
        total += len(y)
    return correct / total


def forgetting_eval(state: EngineState, source_test_sets) -> list[float]:
    """Accuracy of each source model, with its current LN state, on its own test set."""
    if len(source_test_sets) != state.n_sources or any(ts is None for ts in source_test_sets):
        raise ValueError("one source test set per source module is required")
    return [evaluate(state.backbone, mod, ts, ln) for mod, ln, ts in zip(state.modules, state.lns, source_test_sets)]
