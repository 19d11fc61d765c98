"""Synthetic glyph domains, corruption shifts, mixture streams and the
mixture-of-sources bound oracle.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .store import ContainerError, pack_container, unpack_container

NUM_CLASSES = 10
IMAGE_SIZE = 16

CORRUPTIONS = ("identity", "gaussian_noise", "shot_noise", "blur", "contrast", "brightness", "pixelate", "rotation")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, H, W, 1) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    name: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name)


@dataclass(frozen=True)
class DomainSpec:
    corruption: str = "identity"
    severity: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.corruption not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.corruption!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must be in 0..5")

    @property
    def label(self) -> str:
        return f"{self.corruption}:sev{self.severity}"


# ---------------------------------------------------------------------------
# glyphs


def _glyph(cls: int, rng: np.random.Generator) -> np.ndarray:
    n = IMAGE_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    cx = n / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    r = rng.uniform(3.8, 5.2)
    w = rng.uniform(0.8, 1.3)
    dy, dx = yy - cy, xx - cx
    if cls == 0:  # horizontal bar
        m = (np.abs(dy) <= w) & (np.abs(dx) <= r)
    elif cls == 1:  # vertical bar
        m = (np.abs(dx) <= w) & (np.abs(dy) <= r)
    elif cls == 2:  # plus
        m = ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    elif cls == 3:  # diagonal cross
        m = ((np.abs(dy - dx) <= 1.4 * w) | (np.abs(dy + dx) <= 1.4 * w)) & (np.maximum(np.abs(dx), np.abs(dy)) <= r)
    elif cls == 4:  # square outline
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        m = (cheb <= r) & (cheb >= r - 2 * w)
    elif cls == 5:  # filled square
        m = np.maximum(np.abs(dx), np.abs(dy)) <= 0.75 * r
    elif cls == 6:  # ring
        rad = np.hypot(dx, dy)
        m = (rad <= r) & (rad >= r - 2 * w)
    elif cls == 7:  # triangle
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif cls == 8:  # L shape
        m = ((np.abs(dx + r * 0.6) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy - r + w) <= w) & (dx >= -r * 0.6 - w) & (dx <= r))
    elif cls == 9:  # T shape
        m = ((np.abs(dy + r - w) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (dy >= -r) & (dy <= r))
    else:
        raise ValueError(f"class {cls} out of range")
    ink = rng.uniform(0.75, 1.0)
    img = m.astype(np.float64) * ink + rng.normal(0.0, 0.03, size=(n, n))
    return np.clip(img, 0.0, 1.0)


def make_base_dataset(n: int, seed: int = 0) -> Dataset:
    """``n`` balanced glyph images, deterministic per ``seed``."""
    if n < NUM_CLASSES:
        raise ValueError(f"need at least {NUM_CLASSES} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    labels = labels[rng.permutation(n)]
    images = np.stack([_glyph(int(c), rng) for c in labels])[..., None]
    return Dataset(images, labels.astype(np.int64), "base")


# ---------------------------------------------------------------------------
# corruptions

_LEVELS = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60.0, 25.0, 12.0, 6.0, 3.0),
    "blur": (0.5, 0.8, 1.1, 1.5, 2.0),
    "contrast": (0.75, 0.55, 0.4, 0.28, 0.18),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "pixelate": (0.85, 0.7, 0.5, 0.4, 0.3),
    "rotation": (10.0, 20.0, 35.0, 50.0, 70.0),
}


def _rng_for(image: np.ndarray, spec: DomainSpec) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(np.ascontiguousarray(image).tobytes())])


def corrupt(image, spec: DomainSpec) -> np.ndarray:
    """Apply ``spec`` to one ``H x W x C`` image; output clamped to ``[0, 1]``."""
    image = np.asarray(image, dtype=np.float64)
    if spec.corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {spec.corruption!r}")
    if spec.severity == 0 or spec.corruption == "identity":
        return image.copy()
    level = _LEVELS[spec.corruption][spec.severity - 1]
    c = spec.corruption
    if c == "gaussian_noise":
        out = image + _rng_for(image, spec).normal(0.0, level, size=image.shape)
    elif c == "shot_noise":
        out = _rng_for(image, spec).poisson(np.clip(image, 0, 1) * level) / level
    elif c == "blur":
        out = ndimage.gaussian_filter(image, sigma=(level, level, 0), mode="nearest")
    elif c == "contrast":
        mu = image.mean(axis=(0, 1), keepdims=True)
        out = (image - mu) * level + mu
    elif c == "brightness":
        out = image + level
    elif c == "pixelate":
        h, w = image.shape[:2]
        small = max(1, int(round(h * level)))
        zoomed = ndimage.zoom(image, (small / h, small / w, 1), order=0)
        out = ndimage.zoom(zoomed, (h / zoomed.shape[0], w / zoomed.shape[1], 1), order=0)
    else:  # rotation
        angle = level if zlib.crc32(image.tobytes()) % 2 else -level
        out = ndimage.rotate(image, angle, axes=(0, 1), reshape=False, order=1, mode="constant")
    return np.clip(out, 0.0, 1.0)


def make_domain(base: Dataset, spec: DomainSpec) -> Dataset:
    images = np.stack([corrupt(img, spec) for img in base.images]) if len(base) else base.images.copy()
    return Dataset(images, base.labels.copy(), spec.label)


def save_dataset(data: Dataset, spec: DomainSpec | None = None) -> bytes:
    """Pack a dataset as a container: f32 images, u16 labels."""
    header = {"kind": "dataset", "name": data.name, "count": len(data)}
    if spec is not None:
        header["domain"] = {"corruption": spec.corruption, "severity": spec.severity, "seed": spec.seed}
    return pack_container(header, {"images": data.images, "labels": data.labels}, {"labels": "u16"})


def load_dataset(buf: bytes) -> Dataset:
    header, tensors = unpack_container(buf)
    if header.get("kind") != "dataset":
        raise ContainerError(f"container holds kind {header.get('kind')!r}, not a dataset")
    return Dataset(tensors["images"], tensors["labels"].astype(np.int64), header.get("name", ""))


# ---------------------------------------------------------------------------
# target streams


class HiddenLabels:
    """Ground truth carried alongside a stream; read only through :meth:`reveal`."""

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=np.int64)

    def reveal(self) -> np.ndarray:
        return self._labels.copy()

    def __len__(self):
        return len(self._labels)


@dataclass(frozen=True)
class TargetStream:
    images: np.ndarray
    hidden: HiddenLabels
    source_index: np.ndarray  # which domain each sample was drawn from

    def batches(self, batch_size: int) -> list[np.ndarray]:
        return [self.images[i : i + batch_size] for i in range(0, len(self.images), batch_size)]

    def label_batches(self, batch_size: int) -> list[np.ndarray]:
        y = self.hidden.reveal()
        return [y[i : i + batch_size] for i in range(0, len(y), batch_size)]


def _check_simplex(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0 or np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture coefficients must lie on the simplex, got {lam}")
    return lam


def make_mixture_target(domains: list[Dataset], lambdas, n: int, seed: int = 0) -> TargetStream:
    """Draw ``n`` samples, each from domain ``k`` with probability ``lambdas[k]``."""
    lam = _check_simplex(lambdas)
    if len(domains) != lam.size:
        raise ValueError("one mixture coefficient per domain is required")
    rng = np.random.default_rng(seed)
    which = rng.choice(lam.size, size=n, p=lam)
    images, labels = [], []
    for k in which:
        j = rng.integers(len(domains[k]))
        images.append(domains[k].images[j])
        labels.append(domains[k].labels[j])
    return TargetStream(np.stack(images), HiddenLabels(labels), which)


# ---------------------------------------------------------------------------
# mixture bound oracle


def _gauss_pdf(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class GaussianSource:
    """Two-class 1-D problem: ``y ~ Bernoulli(prior)``, ``x | y ~ N(means[y], sds[y])``."""

    prior: float
    means: tuple[float, float]
    sds: tuple[float, float]

    def density(self, x):
        return (1 - self.prior) * _gauss_pdf(x, self.means[0], self.sds[0]) + self.prior * _gauss_pdf(x, self.means[1], self.sds[1])

    def bayes(self, x):
        """P(y = 1 | x), the log-loss minimiser."""
        p1 = self.prior * _gauss_pdf(x, self.means[1], self.sds[1])
        return p1 / (p1 + (1 - self.prior) * _gauss_pdf(x, self.means[0], self.sds[0]))

    def sample(self, n, rng):
        y = (rng.random(n) < self.prior).astype(np.int64)
        mu = np.where(y == 1, self.means[1], self.means[0])
        sd = np.where(y == 1, self.sds[1], self.sds[0])
        return rng.normal(mu, sd), y


def random_gaussian_source(rng) -> GaussianSource:
    return GaussianSource(
        prior=float(rng.uniform(0.2, 0.8)),
        means=(float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3))),
        sds=(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0))),
    )


def _log_loss(p1, y):
    p = np.clip(np.where(y == 1, p1, 1 - p1), 1e-300, 1.0)
    return -np.log(p)


def mixture_bound_oracle(seed: int = 0, sources: list[GaussianSource] | None = None, lambdas=(0.5, 0.5),
                         draws: int = 100_000) -> dict:
    """Monte Carlo check that the density-ratio blend beats every single source on the mixture."""
    rng = np.random.default_rng(seed)
    if sources is None:
        sources = [random_gaussian_source(rng) for _ in range(2)]
    lam = _check_simplex(lambdas)
    which = rng.choice(len(sources), size=draws, p=lam)
    x = np.empty(draws)
    y = np.empty(draws, dtype=np.int64)
    for k, src in enumerate(sources):
        sel = which == k
        x[sel], y[sel] = src.sample(int(sel.sum()), rng)

    dens = np.stack([lk * s.density(x) for lk, s in zip(lam, sources)])
    resp = dens / dens.sum(axis=0)
    target_pred = (resp * np.stack([s.bayes(x) for s in sources])).sum(axis=0)

    lhs_terms = _log_loss(target_pred, y)
    src_terms = [_log_loss(s.bayes(x), y) for s in sources]
    src_means = [float(t.mean()) for t in src_terms]
    best = int(np.argmin(src_means))
    diff = lhs_terms - src_terms[best]
    se = float(diff.std(ddof=1) / np.sqrt(draws))
    lhs, rhs = float(lhs_terms.mean()), src_means[best]
    return {
        "lhs": lhs,
        "rhs": rhs,
        "source_losses": src_means,
        "se": se,
        "holds": bool(lhs <= rhs + 3 * se),
        "draws": draws,
    }
