"""A small frozen vision transformer with pluggable PET modules.

Every LayerNorm reads its affine pair from an :class:`LnState`, which is the
only backbone state touched at test time.  Training uses the autodiff engine
directly; the backbone and the modules share one forward implementation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .store import ModuleRecord, module_shapes, pack_container, unpack_container, ContainerError


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class LnState:
    """Ordered ``(gamma, beta)`` pairs: two per block, then the final norm."""

    def __init__(self, pairs):
        self.pairs = [(np.asarray(g, dtype=np.float64), np.asarray(b, dtype=np.float64)) for g, b in pairs]

    @classmethod
    def identity(cls, cfg: VitConfig) -> "LnState":
        d = cfg.embed_dim
        return cls([(np.ones(d), np.zeros(d)) for _ in range(2 * cfg.depth + 1)])

    def __len__(self):
        return len(self.pairs)

    def copy(self) -> "LnState":
        return LnState([(g.copy(), b.copy()) for g, b in self.pairs])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([g, b]) for g, b in self.pairs])

    def with_flat(self, vec) -> "LnState":
        vec = np.asarray(vec, dtype=np.float64)
        out, off = [], 0
        for g, b in self.pairs:
            n = g.size
            out.append((vec[off : off + n].copy(), vec[off + n : off + 2 * n].copy()))
            off += 2 * n
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {off}")
        return LnState(out)

    def digest(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, LnState) and len(self) == len(other) and np.array_equal(self.flat(), other.flat())


def _backbone_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_embed": (cfg.patch_dim, d),
        "class_token": (d,),
        "positional": (1 + cfg.num_patches, d),
    }
    for i in range(cfg.depth):
        for w in ("q", "k", "v", "o"):
            shapes[f"block{i}.W{w}"] = (d, d)
            shapes[f"block{i}.b{w}"] = (d,)
        shapes[f"block{i}.W1"] = (d, m)
        shapes[f"block{i}.b1"] = (m,)
        shapes[f"block{i}.W2"] = (m, d)
        shapes[f"block{i}.b2"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


@dataclass
class VitParams:
    cfg: VitConfig
    weights: dict[str, np.ndarray]
    ln: LnState = field(default=None)

    def __post_init__(self):
        if self.ln is None:
            self.ln = LnState.identity(self.cfg)
        if len(self.ln) != 2 * self.cfg.depth + 1:
            raise ValueError("LnState length must be 2*depth + 1")

    def backbone_digest(self) -> str:
        """SHA-256 over every non-LN tensor, in a fixed order."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def with_ln(self, ln: LnState) -> "VitParams":
        return replace(self, ln=ln)


def init_params(cfg: VitConfig, rng: np.random.Generator) -> VitParams:
    weights = {}
    for name, shape in _backbone_shapes(cfg).items():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-bound, bound, size=shape)
        elif name in ("class_token",):
            weights[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            weights[name] = np.zeros(shape)
    weights["positional"] = rng.normal(0.0, 0.02, size=(1 + cfg.num_patches, cfg.embed_dim))
    return VitParams(cfg, weights)


# ---------------------------------------------------------------------------
# forward


def patchify(image, cfg: VitConfig) -> np.ndarray:
    """Split ``H x W x C`` (or a batch of them) into row-major flattened patches."""
    image = np.asarray(image, dtype=np.float64)
    H, P, C = cfg.image_size, cfg.patch_size, cfg.channels
    if image.shape[-3:] != (H, H, C):
        raise ValueError(f"image shape {image.shape[-3:]} does not match config ({H}, {H}, {C})")
    lead = image.shape[:-3]
    g = H // P
    x = image.reshape(*lead, g, P, g, P, C)
    x = np.moveaxis(x, -4, -3)  # (..., gy, gx, P, P, C)
    return x.reshape(*lead, g * g, P * P * C)


def patch_tokens(weights: Mapping, images, cfg: VitConfig) -> np.ndarray:
    """Patch embeddings ``X_p E`` for a batch of images, shape ``(B, e, d)``."""
    return patchify(images, cfg) @ np.asarray(weights["patch_embed"])


def _attention(x, W, i, cfg: VitConfig):
    B, S, d = x.shape
    h, dh = cfg.heads, d // cfg.heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

    q = split(ad.apply_linear(x, W[f"block{i}.Wq"], W[f"block{i}.bq"]))
    k = split(ad.apply_linear(x, W[f"block{i}.Wk"], W[f"block{i}.bk"]))
    v = split(ad.apply_linear(x, W[f"block{i}.Wv"], W[f"block{i}.bv"]))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    return ad.apply_linear(ctx, W[f"block{i}.Wo"], W[f"block{i}.bo"])


def _adapter(h, M, prefix):
    down = ad.relu(ad.apply_linear(h, M[f"{prefix}.W_down"], M[f"{prefix}.b_down"]))
    return ad.add(h, ad.apply_linear(down, M[f"{prefix}.W_up"], M[f"{prefix}.b_up"]))


def _as_vars(mapping):
    return {k: v if isinstance(v, ad.Var) else ad.Var(v) for k, v in mapping.items()}


def logits_graph(cfg: VitConfig, weights: Mapping, ln_pairs, images, kind: str | None = None,
                 module: Mapping | None = None, head: tuple | None = None, trace: dict | None = None) -> ad.Var:
    """Batched forward returning a ``(B, K)`` Var.

    Any entry of ``weights``, ``ln_pairs``, ``module`` or ``head`` may be a
    watched Var; everything else is treated as a constant.  ``trace``, when
    given, receives the layer-1 sequence length.
    """
    W = _as_vars(weights)
    M = _as_vars(module) if module is not None else None
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B = images.shape[0]
    d = cfg.embed_dim

    tokens = ad.matmul(patchify(images, cfg), W["patch_embed"])
    pos = W["positional"]
    tokens = ad.add(tokens, ad.index(pos, slice(1, None)))
    cls = ad.add(W["class_token"], ad.index(pos, 0))
    cls = ad.add(ad.reshape(cls, (1, 1, d)), np.zeros((B, 1, d)))
    parts = [cls]
    if kind == "vpt":
        prompts = M["prompts"]
        parts.append(ad.add(ad.reshape(prompts, (1,) + prompts.shape), np.zeros((B, 1, d))))
    elif kind not in (None, "adapter"):
        raise ValueError(f"unknown module kind {kind!r}")
    parts.append(tokens)
    x = ad.concat(parts, axis=1)
    if trace is not None:
        trace["layer1_seq_len"] = x.shape[1]

    for i in range(cfg.depth):
        g1, b1 = ln_pairs[2 * i]
        a = _attention(ad.layer_norm(x, g1, b1, cfg.ln_eps), W, i, cfg)
        if kind == "adapter":
            a = _adapter(a, M, f"layer{i}.attn")
        x = ad.add(x, a)
        g2, b2 = ln_pairs[2 * i + 1]
        h = ad.gelu(ad.apply_linear(ad.layer_norm(x, g2, b2, cfg.ln_eps), W[f"block{i}.W1"], W[f"block{i}.b1"]))
        h = ad.apply_linear(h, W[f"block{i}.W2"], W[f"block{i}.b2"])
        if kind == "adapter":
            h = _adapter(h, M, f"layer{i}.mlp")
        x = ad.add(x, h)

    gf, bf = ln_pairs[-1]
    cls_out = ad.layer_norm(ad.index(x, (slice(None), 0)), gf, bf, cfg.ln_eps)
    hw, hb = head if head is not None else (W["head.weight"], W["head.bias"])
    return ad.apply_linear(cls_out, hw, hb)


def _check_module(cfg: VitConfig, module: ModuleRecord):
    h = module.hyper
    if int(h["embed_dim"]) != cfg.embed_dim or int(h["classes"]) != cfg.num_classes:
        raise ValueError(f"module {module.id!r} built for d={h['embed_dim']}, K={h['classes']}; "
                         f"backbone has d={cfg.embed_dim}, K={cfg.num_classes}")
    if module.kind == "adapter" and int(h["depth"]) != cfg.depth:
        raise ValueError(f"adapter {module.id!r} has {h['depth']} layers, backbone has {cfg.depth}")


def forward_batch(params: VitParams, module: ModuleRecord | None, images, ln: LnState | None = None,
                  trace: dict | None = None) -> np.ndarray:
    cfg = params.cfg
    ln = params.ln if ln is None else ln
    if module is None:
        return logits_graph(cfg, params.weights, ln.pairs, images, trace=trace).data
    _check_module(cfg, module)
    return logits_graph(cfg, params.weights, ln.pairs, images, module.kind, module.payload,
                        (module.head_weight, module.head_bias), trace=trace).data


def forward(params: VitParams, module: ModuleRecord | None, image, ln: LnState | None = None) -> np.ndarray:
    """Logits for a single ``H x W x C`` image."""
    return forward_batch(params, module, np.asarray(image)[None], ln)[0]


def predict(params: VitParams, module: ModuleRecord | None, images, ln: LnState | None = None,
            batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    out = [forward_batch(params, module, images[i : i + batch_size], ln) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(params: VitParams, module: ModuleRecord | None, dataset, ln: LnState | None = None) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(params, module, dataset.images, ln)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adamw"  # "adamw" or "sgd"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 64

    def lr_at(self, step: int, total: int, steps_per_epoch: int) -> float:
        warm = self.warmup_epochs * steps_per_epoch
        if step < warm:
            return self.lr * (step + 1) / warm
        frac = (step - warm) / max(1, total - warm)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """AdamW (decoupled decay) or heavy-ball SGD over a dict of arrays."""

    def __init__(self, spec: OptimizerSpec, params: dict[str, np.ndarray]):
        if spec.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {spec.kind!r}")
        self.spec = spec
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        s = self.spec
        self.t += 1
        for k, g in grads.items():
            p = params[k]
            if s.kind == "sgd":
                if s.weight_decay:
                    g = g + s.weight_decay * p
                self.m[k] = s.momentum * self.m[k] + g
                params[k] = p - lr * self.m[k]
            else:
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1**self.t)
                vh = self.v[k] / (1 - b2**self.t)
                decay = s.weight_decay * p if p.ndim > 1 else 0.0
                params[k] = p - lr * (mh / (np.sqrt(vh) + 1e-8) + decay)


def cross_entropy(logits: ad.Var, labels: np.ndarray) -> ad.Var:
    lp = ad.log_softmax(logits, axis=-1)
    picked = ad.index(lp, (np.arange(len(labels)), labels))
    return ad.neg(ad.mean(picked))


def _fit(trainable: dict[str, np.ndarray], loss_fn, images, labels, opt: OptimizerSpec, rng) -> float:
    n = len(labels)
    steps_per_epoch = math.ceil(n / opt.batch_size)
    total = opt.epochs * steps_per_epoch
    optim = Optimizer(opt, trainable)
    step = 0
    loss_val = float("nan")
    for _ in range(opt.epochs):
        order = rng.permutation(n)
        for s in range(0, n, opt.batch_size):
            idx = order[s : s + opt.batch_size]
            ctx = ad.GradContext()
            watched = {k: ctx.watch(k, v) for k, v in trainable.items()}
            loss = loss_fn(watched, images[idx], labels[idx])
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(f"training loss became {loss_val} at step {step}")
            grads = ctx.gradient(loss)
            optim.step(trainable, grads, opt.lr_at(step, total, steps_per_epoch))
            step += 1
    return loss_val


def _check_dataset(data, cfg: VitConfig):
    if data is None or len(data.labels) == 0:
        raise ValueError("training dataset is empty")
    if np.any(np.asarray(data.labels) >= cfg.num_classes) or np.any(np.asarray(data.labels) < 0):
        raise ValueError("labels must lie in [0, num_classes)")


def pretrain_backbone(data, cfg: VitConfig = VitConfig(), opt: OptimizerSpec = OptimizerSpec(), seed: int = 0) -> VitParams:
    """Train every backbone weight (LN affine pairs included) from scratch."""
    _check_dataset(data, cfg)
    rng = np.random.default_rng(seed)
    init = init_params(cfg, rng)
    trainable = dict(init.weights)
    for i, (g, b) in enumerate(init.ln.pairs):
        trainable[f"ln{i}.gamma"] = g
        trainable[f"ln{i}.beta"] = b
    n_ln = len(init.ln)

    def loss_fn(w, x, y):
        pairs = [(w[f"ln{i}.gamma"], w[f"ln{i}.beta"]) for i in range(n_ln)]
        return cross_entropy(logits_graph(cfg, w, pairs, x), y)

    images = np.asarray(data.images, dtype=np.float64)
    labels = np.asarray(data.labels)
    _fit(trainable, loss_fn, images, labels, opt, rng)
    ln = LnState([(trainable.pop(f"ln{i}.gamma"), trainable.pop(f"ln{i}.beta")) for i in range(n_ln)])
    return VitParams(cfg, trainable, ln)


def init_module(cfg: VitConfig, kind: str, size: int, rng: np.random.Generator) -> tuple[dict, dict]:
    """Fresh payload and hyper for a VPT (``size`` prompts) or adapter (``size`` bottleneck)."""
    d = cfg.embed_dim
    if kind == "vpt":
        hyper = {"prompts": int(size), "embed_dim": d, "classes": cfg.num_classes}
    elif kind == "adapter":
        hyper = {"bottleneck": int(size), "embed_dim": d, "depth": cfg.depth, "classes": cfg.num_classes}
    else:
        raise ValueError(f"unknown module kind {kind!r}")
    payload = {}
    for name, shape in module_shapes(kind, hyper).items():
        if name == "prompts":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            payload[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("W_down"):
            payload[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            payload[name] = np.zeros(shape)
    return hyper, payload


def random_module(cfg: VitConfig, kind: str = "vpt", size: int = 4, seed: int = 0, module_id: str = "",
                  scale: float = 0.1, domain_label: str = "") -> ModuleRecord:
    """Untrained module with every tensor (head included) drawn at random; for tests and oracles."""
    rng = np.random.default_rng(seed)
    hyper, payload = init_module(cfg, kind, size, rng)
    payload = {k: rng.normal(0.0, scale, size=v.shape) for k, v in payload.items()}
    return ModuleRecord(
        id=module_id or f"{kind}-rand-{seed}",
        domain_label=domain_label,
        kind=kind,
        hyper=hyper,
        payload=payload,
        head_weight=rng.normal(0.0, 1.0 / math.sqrt(cfg.embed_dim), size=(cfg.embed_dim, cfg.num_classes)),
        head_bias=rng.normal(0.0, 0.1, size=cfg.num_classes),
        meta={"seed": int(seed)},
    ).quantized()


def pretrain_source_module(params: VitParams, kind: str, source, opt: OptimizerSpec, seed: int = 0,
                           size: int = 8, module_id: str | None = None, domain_label: str = "") -> ModuleRecord:
    """Train a PET module and its own head on ``source`` with the backbone frozen."""
    cfg = params.cfg
    _check_dataset(source, cfg)
    rng = np.random.default_rng(seed)
    hyper, payload = init_module(cfg, kind, size, rng)
    trainable = dict(payload)
    trainable["head.weight"] = params.weights["head.weight"].copy()
    trainable["head.bias"] = params.weights["head.bias"].copy()
    pnames = list(payload)

    def loss_fn(w, x, y):
        mod = {k: w[k] for k in pnames}
        out = logits_graph(cfg, params.weights, params.ln.pairs, x, kind, mod, (w["head.weight"], w["head.bias"]))
        return cross_entropy(out, y)

    images = np.asarray(source.images, dtype=np.float64)
    labels = np.asarray(source.labels)
    _fit(trainable, loss_fn, images, labels, opt, rng)
    record = ModuleRecord(
        id=module_id or f"{kind}-{(domain_label or 'source').replace(':', '-')}-s{seed}",
        domain_label=domain_label,
        kind=kind,
        hyper=hyper,
        payload={k: trainable[k] for k in pnames},
        head_weight=trainable["head.weight"],
        head_bias=trainable["head.bias"],
        meta={"seed": int(seed)},
    ).quantized()
    record.meta["source_train_accuracy"] = evaluate(params, record, source)
    record.meta["head_param_count"] = record.head_param_count()
    return record


# ---------------------------------------------------------------------------
# checkpoints


def save_backbone(params: VitParams) -> bytes:
    tensors = dict(sorted(params.weights.items()))
    for i, (g, b) in enumerate(params.ln.pairs):
        tensors[f"ln{i}.gamma"] = g
        tensors[f"ln{i}.beta"] = b
    header = {"kind": "backbone", "config": params.cfg.__dict__}
    return pack_container(header, tensors)


def load_backbone(buf: bytes) -> VitParams:
    header, tensors = unpack_container(buf)
    if header.get("kind") != "backbone":
        raise ContainerError(f"container holds kind {header.get('kind')!r}, not a backbone")
    cfg = VitConfig(**header["config"])
    n_ln = 2 * cfg.depth + 1
    ln = LnState([(tensors.pop(f"ln{i}.gamma"), tensors.pop(f"ln{i}.beta")) for i in range(n_ln)])
    return VitParams(cfg, tensors, ln)


def quantize(params: VitParams) -> VitParams:
    """Round-trip through the 32-bit checkpoint so in-memory and on-disk agree."""
    return load_backbone(save_backbone(params))
