"""Self-contained oracle checks, shared by ``pluto verify`` and the test suite.

Each check returns ``CheckResult(name, ok, detail)``; nothing here needs a
trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sam import _sample_entropies, entropy_gradient, epsilon_star, sam_gradient
from .synth import mixture_bound_oracle
from .vit import LnState, VitConfig, VitParams, init_params, random_module


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# Same architecture at a size where a full finite-difference sweep of the
# LN vector (5 pairs x 2 x 16 = 160 coordinates) stays cheap.
ORACLE_VIT = VitConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2)


def oracle_problem(seed: int, cfg: VitConfig = ORACLE_VIT, batch: int = 2, kind: str = "vpt"):
    """Random backbone, random module, jittered LN state and a small image batch."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    module = random_module(cfg, kind, 4, seed=seed + 1, scale=0.3)
    ln = params.ln.with_flat(params.ln.flat() + rng.normal(0.0, 0.2, size=params.ln.flat().size))
    images = rng.uniform(0.0, 1.0, size=(batch, cfg.image_size, cfg.image_size, cfg.channels))
    return params, module, ln, images


def _mean_entropy_at(params: VitParams, module, ln: LnState, images):
    return lambda flat: float(np.mean(_sample_entropies(params, module, ln.with_flat(flat), images)))


def sam_gradient_vs_fd(seed: int, rho: float = 0.05, h: float = 1e-4, cfg: VitConfig = ORACLE_VIT,
                       kind: str = "vpt") -> float:
    """Relative error of the perturbed gradient against a purely finite-difference pipeline."""
    params, module, ln, images = oracle_problem(seed, cfg, kind=kind)
    f = _mean_entropy_at(params, module, ln, images)
    v_fd = ad.finite_difference_gradient(f, ln.flat(), h)
    g_fd = ad.finite_difference_gradient(f, ln.flat() + epsilon_star(v_fd, rho), h)
    return rel_error(sam_gradient(params, module, ln, images, rho), g_fd)


def rho_limit_error(seed: int, rho: float = 1e-10) -> float:
    params, module, ln, images = oracle_problem(seed)
    return rel_error(sam_gradient(params, module, ln, images, rho), entropy_gradient(params, module, ln, images))


def epsilon_norm_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=int(rng.integers(1, 400))) * 10.0 ** rng.uniform(-6, 6)
    rho = float(10.0 ** rng.uniform(-4, 0))
    return abs(np.linalg.norm(epsilon_star(v, rho)) - rho)


def random_lambdas(seed: int) -> tuple[float, float]:
    a = float(np.random.default_rng(10_000 + seed).uniform(0.1, 0.9))
    return a, 1.0 - a


def run_oracle_suite(seed: int = 0, configs: int = 20, draws: int = 100_000) -> list[CheckResult]:
    out = []
    for k in range(configs):
        s = seed * 1000 + k
        r = mixture_bound_oracle(seed=s, lambdas=random_lambdas(s), draws=draws)
        out.append(CheckResult(f"mixture_bound[{s}]", r["holds"],
                               f"lhs={r['lhs']:.5f} rhs={r['rhs']:.5f} se={r['se']:.2e}"))
    return out


def run_gradient_suite(seed: int = 0, seeds: int = 30, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for k in range(seeds):
        err = sam_gradient_vs_fd(seed * 1000 + k)
        out.append(CheckResult(f"sam_gradient_fd[{seed * 1000 + k}]", bool(err <= tol), f"rel_err={err:.2e}"))
    for k in range(3):
        err = rho_limit_error(seed * 1000 + k)
        out.append(CheckResult(f"rho_to_zero[{seed * 1000 + k}]", err <= 1e-6, f"rel_err={err:.2e}"))
    return out


def run_epsilon_suite(seed: int = 0, cases: int = 200) -> list[CheckResult]:
    worst = max(epsilon_norm_error(seed * 1000 + k) for k in range(cases))
    zero_ok = not np.any(epsilon_star(np.zeros(7), 0.05))
    return [
        CheckResult("epsilon_norm_equals_rho", bool(worst <= 1e-12), f"max_abs_err={worst:.1e} over {cases} draws"),
        CheckResult("epsilon_zero_gradient", zero_ok, "eps*(0) == 0"),
    ]


def run_all(seed: int = 0) -> list[CheckResult]:
    return run_oracle_suite(seed) + run_gradient_suite(seed) + run_epsilon_suite(seed)


def entropy_threshold(factor: float, num_classes: int) -> float:
    return factor * math.log(num_classes)
