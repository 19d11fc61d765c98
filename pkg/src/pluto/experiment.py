"""Desk-scale experiment configuration and the end-to-end pipelines behind the CLI."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synth
from .engine import (EngineConfig, EngineState, forgetting_eval, run_stream, single_source_accuracy,
                     image_representation, source_logits, uniform_ensemble_baseline)
from .sam import SamConfig
from .selector import SelectorConfig, SelectorParams, init_selector, init_supervised, load_selector, save_selector
from .store import ModuleRecord, ModuleStore, adapter_param_count, selector_param_count, vpt_param_count
from .synth import Dataset, DomainSpec, HiddenLabels, TargetStream
from .vit import OptimizerSpec, VitConfig, VitParams, pretrain_backbone, pretrain_source_module, quantize

logger = logging.getLogger(__name__)

DEFAULT_SOURCES = ("gaussian_noise", "blur", "contrast", "brightness")


@dataclass(frozen=True)
class DataSizes:
    base_train: int = 1000
    source_train: int = 600
    source_test: int = 300
    selector_train: int = 600  # per source
    target: int = 320


@dataclass(frozen=True)
class ExperimentConfig:
    vit: VitConfig = VitConfig()
    selector: SelectorConfig = SelectorConfig()
    engine: EngineConfig = EngineConfig()
    sources: tuple[DomainSpec, ...] = tuple(DomainSpec(c, 3) for c in DEFAULT_SOURCES)
    target: DomainSpec = DomainSpec("pixelate", 3)
    target_mixture: tuple[float, ...] | None = None  # when set, target is a mixture of the sources
    sizes: DataSizes = DataSizes()
    module_kind: str = "vpt"
    module_size: int = 8
    backbone_opt: OptimizerSpec = OptimizerSpec("adamw", lr=3e-3, weight_decay=1e-4, epochs=40, warmup_epochs=4)
    vpt_opt: OptimizerSpec = OptimizerSpec("sgd", lr=0.5, weight_decay=0.0, momentum=0.9, epochs=20, warmup_epochs=2)
    adapter_opt: OptimizerSpec = OptimizerSpec("adamw", lr=3e-3, weight_decay=1e-4, epochs=20, warmup_epochs=2)
    selector_lr: float = 0.1
    selector_epochs: int = 100
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.module_kind not in ("vpt", "adapter"):
            raise ValueError(f"unknown module kind {self.module_kind!r}")
        if self.selector.d != self.vit.embed_dim or self.selector.v != self.vit.num_classes:
            raise ValueError("selector d/v must match the backbone embed_dim/num_classes")
        if self.engine.top_m > len(self.sources):
            raise ValueError("top_m exceeds the number of sources")

    @property
    def module_opt(self) -> OptimizerSpec:
        return self.vpt_opt if self.module_kind == "vpt" else self.adapter_opt

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        for key, typ in (("vit", VitConfig), ("selector", SelectorConfig), ("sizes", DataSizes)):
            if key in d:
                kw[key] = typ(**d.pop(key))
        for key in ("backbone_opt", "vpt_opt", "adapter_opt"):
            if key in d:
                kw[key] = OptimizerSpec(**d.pop(key))
        if "engine" in d:
            e = dict(d.pop("engine"))
            if "sam" in e:
                e["sam"] = SamConfig(**e["sam"])
            kw["engine"] = EngineConfig(**e)
        if "sources" in d:
            kw["sources"] = tuple(DomainSpec(**s) for s in d.pop("sources"))
        if "target" in d:
            kw["target"] = DomainSpec(**d.pop("target"))
        if d.get("target_mixture") is not None:
            d["target_mixture"] = tuple(d["target_mixture"])
        kw.update(d)
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# data


def _domain_seed(cfg: ExperimentConfig, j: int, role: int) -> int:
    return cfg.seed * 10_000 + role * 100 + j


def source_domains(cfg: ExperimentConfig) -> list[tuple[Dataset, Dataset, Dataset]]:
    """``(train, test, selector-train)`` per source, each from fresh base glyphs."""
    out = []
    for j, spec in enumerate(cfg.sources):
        spec = dataclasses.replace(spec, seed=_domain_seed(cfg, j, 1))
        sets = []
        for role, n in ((2, cfg.sizes.source_train), (3, cfg.sizes.source_test), (4, cfg.sizes.selector_train)):
            sets.append(synth.make_domain(synth.make_base_dataset(n, _domain_seed(cfg, j, role)), spec))
        out.append(tuple(sets))
    return out


def target_stream(cfg: ExperimentConfig, sources=None) -> TargetStream:
    if cfg.target_mixture is not None:
        doms = [s[1] for s in (sources or source_domains(cfg))]
        return synth.make_mixture_target(doms, cfg.target_mixture, cfg.sizes.target, _domain_seed(cfg, 0, 7))
    base = synth.make_base_dataset(cfg.sizes.target, _domain_seed(cfg, 0, 5))
    spec = dataclasses.replace(cfg.target, seed=_domain_seed(cfg, 0, 6))
    dom = synth.make_domain(base, spec)
    return TargetStream(dom.images, HiddenLabels(dom.labels), np.zeros(len(dom), dtype=np.int64))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class World:
    cfg: ExperimentConfig
    backbone: VitParams
    modules: list[ModuleRecord]
    selector: SelectorParams
    source_tests: list[Dataset]
    stream: TargetStream
    param_table: dict = field(default_factory=dict)

    def state(self) -> EngineState:
        return EngineState.create(self.backbone, self.modules, self.selector)


def selector_training_set(backbone: VitParams, modules, datasets: list[Dataset]):
    images = np.concatenate([d.images for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    st = EngineState.create(backbone, modules, init_selector(SelectorConfig(d=backbone.cfg.embed_dim, v=backbone.cfg.num_classes)))
    return image_representation(backbone, images), source_logits(st, images), labels


def param_table(cfg: ExperimentConfig, modules: list[ModuleRecord], selector: SelectorParams) -> dict:
    s = cfg.selector
    rows = {
        "vpt_formula": vpt_param_count(cfg.module_size, cfg.vit.embed_dim),
        "adapter_formula": adapter_param_count(cfg.vit.depth, cfg.vit.embed_dim, cfg.module_size),
        "selector_formula": selector_param_count(s.d, s.dx, s.dl, s.dp, s.v),
        "selector_stored": selector.param_count(),
        "modules": [
            {"id": m.id, "kind": m.kind, "stored": m.payload_param_count(), "formula": m.formula_param_count(),
             "head": m.head_param_count()}
            for m in modules
        ],
    }
    return rows


def pretrain_world(cfg: ExperimentConfig) -> World:
    base = synth.make_base_dataset(cfg.sizes.base_train, _domain_seed(cfg, 0, 0))
    logger.info("pretraining backbone on %d base images", len(base))
    backbone = quantize(pretrain_backbone(base, cfg.vit, cfg.backbone_opt, seed=cfg.seed))
    sources = source_domains(cfg)
    modules = []
    for j, (spec, (train, _, _)) in enumerate(zip(cfg.sources, sources)):
        logger.info("pretraining %s module for %s", cfg.module_kind, spec.label)
        modules.append(pretrain_source_module(
            backbone, cfg.module_kind, train, cfg.module_opt, seed=_domain_seed(cfg, j, 8), size=cfg.module_size,
            module_id=f"{cfg.module_kind}-{j:02d}-{spec.corruption}-sev{spec.severity}", domain_label=spec.label))
    x_hat, logits, labels = selector_training_set(backbone, modules, [s[2] for s in sources])
    sel = init_selector(cfg.selector, seed=cfg.seed)
    sel = init_supervised(sel, x_hat, logits, labels, lr=cfg.selector_lr, epochs=cfg.selector_epochs,
                          seed=cfg.seed, dropout_rate=cfg.selector.dropout_rate)
    sel = load_selector(save_selector(sel, cfg.selector))[0]
    return World(cfg, backbone, modules, sel, [s[1] for s in sources], target_stream(cfg, sources),
                 param_table(cfg, modules, sel))


# ---------------------------------------------------------------------------
# adaptation runs


def adapt(world: World, engine: EngineConfig | None = None, results_file=None) -> dict:
    """PLUTO and the uniform baseline on the same stream, plus forgetting and single-source numbers."""
    engine = engine or world.cfg.engine
    B = engine.batch_size
    batches = world.stream.batches(B)
    labels = world.stream.label_batches(B)
    state = world.state()
    before = forgetting_eval(state, world.source_tests)

    pluto = run_stream(state, batches, engine, labels, results_file)
    base = uniform_ensemble_baseline(state, batches, engine, labels, ln_update=True)
    singles = [single_source_accuracy(state, j, batches, labels) for j in range(state.n_sources)]
    after_pluto = forgetting_eval(pluto.final_state, world.source_tests)
    after_base = forgetting_eval(base.final_state, world.source_tests)
    return {
        "pluto_accuracy": pluto.mean_accuracy,
        "baseline_accuracy": base.mean_accuracy,
        "difference": pluto.mean_accuracy - base.mean_accuracy,
        "single_source_accuracy": singles,
        "source_accuracy_before": before,
        "source_accuracy_after_pluto": after_pluto,
        "source_accuracy_after_baseline": after_base,
        "forgetting_pluto": float(np.mean(np.subtract(before, after_pluto))),
        "forgetting_baseline": float(np.mean(np.subtract(before, after_base))),
        "pluto": pluto.summary(),
        "shots": engine.shots,
        "top_m": engine.top_m,
        "_pluto_metrics": pluto,
        "_baseline_metrics": base,
    }


def sweep_m(world: World, ms, engine: EngineConfig | None = None) -> list[dict]:
    engine = engine or world.cfg.engine
    B = engine.batch_size
    batches, labels = world.stream.batches(B), world.stream.label_batches(B)
    rows = []
    for m in ms:
        met = run_stream(world.state(), batches, dataclasses.replace(engine, top_m=m), labels)
        rows.append({"top_m": m, "accuracy": met.mean_accuracy})
    return rows


# ---------------------------------------------------------------------------
# store persistence


def save_world(world: World, store_dir) -> ModuleStore:
    from .vit import save_backbone

    root = Path(store_dir)
    store = ModuleStore(root)
    for m in world.modules:
        if m.id not in store:
            store.put(m)
    (root / "backbone.plut").write_bytes(save_backbone(world.backbone))
    (root / "selector.plut").write_bytes(save_selector(world.selector, world.cfg.selector))
    return store


def load_world(cfg: ExperimentConfig, store_dir) -> World:
    from .vit import load_backbone

    root = Path(store_dir)
    store = ModuleStore(root)
    backbone = load_backbone((root / "backbone.plut").read_bytes())
    selector, _ = load_selector((root / "selector.plut").read_bytes())
    listing = store.list()
    wanted = [s.label for s in cfg.sources]
    by_label = {e["domain_label"]: e["id"] for e in listing if e["kind"] == cfg.module_kind}
    missing = [w for w in wanted if w not in by_label]
    if missing:
        raise KeyError(f"store {root} lacks modules for {missing}")
    modules = [store.get(by_label[w]) for w in wanted]
    sources = source_domains(cfg)
    return World(cfg, backbone, modules, selector, [s[1] for s in sources], target_stream(cfg, sources),
                 param_table(cfg, modules, selector))
