"""Evaluation protocols for saliency maps.

Deletion/insertion AUC, N/S quantification, saliency attack score,
energy-based pointing game and the cascading-randomization sanity check.
Every function here takes maps as plain ``[H, W]`` arrays so externally
produced maps can be scored the same way as our own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, stats

from nsexplain.causal import EPS
from nsexplain.engine import DTYPE, Model, check_class, forward, forward_batch, probabilities
from nsexplain.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class Curve:
    fractions: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        f = np.asarray(self.fractions, dtype=np.float64)
        p = np.asarray(self.probs, dtype=np.float64)
        if f.shape != p.shape or f.ndim != 1 or f.size < 2:
            raise ShapeError("curve needs equal-length 1-d fractions and probs with at least 2 points")
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise ShapeError("curve fractions must increase strictly from 0 to 1")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def check(self, height: int, width: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ShapeError(f"bbox {self} is degenerate or outside a {height}x{width} map")


@dataclass
class ImageRecord:
    image: str
    class_index: int | None = None
    deletion_auc: float | None = None
    insertion_auc: float | None = None
    overall: float | None = None
    n_score: float | None = None
    s_score: float | None = None
    map_size: float | None = None
    attack_flip: int | None = None
    proportion: float | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None


RECORD_FIELDS = [
    "image",
    "class_index",
    "deletion_auc",
    "insertion_auc",
    "overall",
    "n_score",
    "s_score",
    "map_size",
    "attack_flip",
    "proportion",
]
_AGGREGATED = RECORD_FIELDS[2:]


@dataclass
class EvalReport:
    records: list[ImageRecord]
    settings: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        ok = [r for r in self.records if r.error is None]
        for name in _AGGREGATED:
            vals = [getattr(r, name) for r in ok if getattr(r, name) is not None]
            out[f"mean_{name}"] = float(np.mean(vals)) if vals else None
        # attack score pooled over the whole set
        flips = [r.attack_flip for r in ok if r.attack_flip is not None]
        sizes = [r.map_size for r in ok if r.map_size is not None and r.attack_flip is not None]
        if flips and sizes:
            out["flip_rate"] = float(np.mean(flips))
            out["avg_attack_size"] = float(np.mean(sizes))
            out["attack_score"] = out["flip_rate"] / max(out["avg_attack_size"], EPS)
        out["images"] = len(self.records)
        out["failed"] = len(self.records) - len(ok)
        return out

    def to_dict(self) -> dict:
        return {
            "settings": self.settings,
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates(),
        }


# ---------------------------------------------------------------------------
# helpers


def _probs(model: Model, xs: np.ndarray) -> np.ndarray:
    return probabilities(model, forward_batch(model, xs))


def _prob(model: Model, x: np.ndarray, class_index: int) -> float:
    return float(probabilities(model, forward(model, x))[class_index])


def _as_map(saliency, image: np.ndarray) -> np.ndarray:
    grid = np.asarray(getattr(saliency, "grid", saliency), dtype=np.float64)
    if grid.shape != image.shape[1:]:
        raise ShapeError(f"map dims {list(grid.shape)} != image spatial dims {list(image.shape[1:])}")
    return grid


def gaussian_blur(image: np.ndarray, kernel: int = 11, sigma: float = 5.0) -> np.ndarray:
    """Per-channel Gaussian blur with a ``kernel x kernel`` support (reflect borders)."""
    radius = kernel // 2
    out = np.stack(
        [ndimage.gaussian_filter(ch.astype(np.float64), sigma, mode="reflect", truncate=radius / sigma) for ch in image]
    )
    return out.astype(DTYPE)


def pixel_order(saliency: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending saliency; ties keep row-major order."""
    flat = np.asarray(saliency, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def map_size(saliency, threshold: float = 0.0) -> float:
    grid = np.asarray(getattr(saliency, "grid", saliency))
    return float(np.count_nonzero(grid > threshold) / grid.size)


# ---------------------------------------------------------------------------
# protocols


def deletion_insertion(
    model: Model,
    image: np.ndarray,
    class_index: int,
    saliency,
    steps: int = 100,
    blur_kernel: int = 11,
    blur_sigma: float = 5.0,
) -> tuple[Curve, Curve]:
    """Probability curves as ranked pixels are deleted (zeroed) or inserted onto a blurred copy."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    check_class(model, class_index)
    image = np.asarray(image, dtype=DTYPE)
    grid = _as_map(saliency, image)
    c, h, w = image.shape
    total = h * w
    per_step = math.ceil(total / steps)
    n_steps = math.ceil(total / per_step)
    order = pixel_order(grid)
    counts = np.minimum(np.arange(n_steps + 1) * per_step, total)

    # rank[p] = position of pixel p in the removal order
    rank = np.empty(total, dtype=np.int64)
    rank[order] = np.arange(total)
    done = (rank[None, :] < counts[:, None]).reshape(-1, 1, h, w)

    flat_img = image[None]
    deleted = np.where(done, DTYPE(0), flat_img)
    blurred = gaussian_blur(image, blur_kernel, blur_sigma)[None]
    inserted = np.where(done, flat_img, blurred)

    fractions = counts / total
    del_p = _probs(model, deleted)[:, class_index]
    ins_p = _probs(model, inserted)[:, class_index]
    return Curve(fractions, del_p), Curve(fractions, ins_p)


def auc(curve: Curve) -> float:
    """Trapezoidal area under ``curve``."""
    f, p = curve.fractions, curve.probs
    return float(np.sum((f[1:] - f[:-1]) * (p[1:] + p[:-1]) / 2.0))


def ns_quantification(
    model: Model,
    image: np.ndarray,
    class_index: int,
    saliency,
    threshold: float = 0.0,
) -> tuple[float | None, float | None, float, list[str]]:
    """``(n_score, s_score, map_size, warnings)`` for one map.

    Scores are None (with a warning) when the map has no nonzero entry.
    """
    check_class(model, class_index)
    image = np.asarray(image, dtype=DTYPE)
    grid = _as_map(saliency, image).astype(DTYPE)
    size = map_size(grid, threshold)
    if size == 0.0:
        return None, None, 0.0, ["all-zero saliency map: N/S scores undefined"]
    p = _prob(model, image, class_index)
    removed, kept = _probs(model, np.stack([image * (DTYPE(1) - grid), image * grid]))[:, class_index]
    return ns_scores(p, float(removed), float(kept), size) + (size, [])


def ns_scores(p_orig: float, p_removed: float, p_kept: float, size: float) -> tuple[float, float]:
    d = max(p_orig, EPS)
    size = max(size, EPS)
    return (p_orig / d - p_removed / d) / size, (p_kept / d) / size


def attack_flip(model: Model, image: np.ndarray, saliency, noise: np.ndarray) -> int:
    image = np.asarray(image, dtype=DTYPE)
    grid = _as_map(saliency, image).astype(DTYPE)
    attacked = np.clip(image + noise.astype(DTYPE) * grid, 0.0, 1.0)
    before, after = _probs(model, np.stack([image, attacked])).argmax(axis=1)
    return int(before != after)


def attack_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    return rng.normal(0.0, sigma, size=shape)


def attack_score(
    model: Model,
    images: Sequence[np.ndarray],
    maps: Sequence,
    sigma: float = 0.1,
    seed: int = 0,
    threshold: float = 0.0,
) -> tuple[float, float, float]:
    """``(flip_rate, avg_size, flip_rate / avg_size)`` with seeded Gaussian noise on salient pixels."""
    if not images:
        raise ConfigError("attack_score needs at least one image")
    if len(images) != len(maps):
        raise ConfigError("attack_score needs one map per image")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(seed)
    flips, sizes = [], []
    for image, saliency in zip(images, maps):
        image = np.asarray(image, dtype=DTYPE)
        flips.append(attack_flip(model, image, saliency, attack_noise(rng, image.shape, sigma)))
        sizes.append(map_size(saliency, threshold))
    return attack_summary(flips, sizes)


def attack_summary(flips: Sequence[int], sizes: Sequence[float]) -> tuple[float, float, float]:
    flip_rate = float(np.mean(flips))
    avg_size = float(np.mean(sizes))
    return flip_rate, avg_size, flip_rate / max(avg_size, EPS)


def energy_pointing(saliency, bbox: BBox) -> tuple[float | None, list[str]]:
    """Share of saliency mass inside ``bbox``; None with a warning for an all-zero map."""
    grid = np.asarray(getattr(saliency, "grid", saliency), dtype=np.float64)
    bbox.check(*grid.shape)
    total = grid.sum()
    if total == 0:
        return None, ["all-zero saliency map: pointing proportion undefined"]
    return float(grid[bbox.y0 : bbox.y1, bbox.x0 : bbox.x1].sum() / total), []


def rank_similarity(a, b) -> float | None:
    """Spearman correlation of two flattened maps; None if either is constant."""
    a = np.asarray(getattr(a, "grid", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "grid", b), dtype=np.float64).ravel()
    if np.all(a == a[0]) or np.all(b == b[0]):
        return None
    return float(stats.spearmanr(a, b).statistic)


@dataclass
class SanityStage:
    stage: str
    n_similarity: float | None
    s_similarity: float | None

    @property
    def mean_similarity(self) -> float | None:
        vals = [v for v in (self.n_similarity, self.s_similarity) if v is not None]
        return float(np.mean(vals)) if vals else None


def randomize_layer(model: Model, layer_id: str, rng: np.random.Generator, std: float = 0.05) -> Model:
    w = model.weights[layer_id]
    return model.with_weights(
        {layer_id: {name: rng.normal(0.0, std, size=arr.shape).astype(DTYPE) for name, arr in w.items()}}
    )


def sanity_check(
    model: Model,
    explain_fn: Callable[[Model, np.ndarray], tuple],
    image: np.ndarray,
    seed: int,
    std: float = 0.05,
) -> list[SanityStage]:
    """Cascading randomization from the output-side layer to the input-side layer.

    ``explain_fn(model, image)`` must return ``(n_map, s_map)``. The first
    stage (label ``"original"``) compares the baseline with itself.
    """
    layers = model.parameterized_layers
    if not layers:
        raise ConfigError("model has no parameterized layer to randomize")
    rng = np.random.default_rng(seed)
    base_n, base_s = explain_fn(model, image)

    def sim(a, b) -> float | None:
        return 1.0 if a is b else rank_similarity(a, b)

    trace = [SanityStage("original", sim(base_n, base_n), sim(base_s, base_s))]
    current = model
    for layer_id in reversed(layers):
        current = randomize_layer(current, layer_id, rng, std)
        n_map, s_map = explain_fn(current, image)
        trace.append(SanityStage(layer_id, rank_similarity(n_map, base_n), rank_similarity(s_map, base_s)))
    return trace
