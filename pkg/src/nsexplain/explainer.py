"""Necessity/sufficiency saliency pipeline for one image, one class, one layer.

Two kinds of cause are supported:

* ``feature``: each channel of the explained layer defines a soft image mask
  (its activation map, upsampled and min-max normalised). Removing a coalition
  multiplies the image by ``1 - union``; keeping it multiplies by ``union``.
* ``filter``: each filter of the explained conv layer is a cause. Removing a
  coalition zeroes those output channels; keeping it zeroes all the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nsexplain.causal import (
    EPS,
    CauseUniverse,
    CoalitionValueFn,
    ShapleyReport,
    select_hypothesized,
    shapley_exact,
    shapley_sampled,
    singleton_scan,
)
from nsexplain.engine import (
    DTYPE,
    FilterOverlay,
    Model,
    activations_at,
    check_class,
    hadamard,
    minmax_norm,
    predict_prob,
    probabilities,
    run_layers,
    upsample_bilinear,
)
from nsexplain.errors import ConfigError, ShapeError

CAUSE_KINDS = ("feature", "filter")
BATCH = 64


@dataclass(frozen=True)
class ExplainConfig:
    seed: int
    k_n: int = 32
    k_s: int = 32
    permutations: int = 64
    exact_threshold: int = 10

    def __post_init__(self) -> None:
        for name in ("k_n", "k_s", "permutations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.exact_threshold < 0:
            raise ConfigError(f"exact_threshold must be >= 0, got {self.exact_threshold}")
        if self.seed is None:
            raise ConfigError("an explicit seed is required")


@dataclass(frozen=True)
class ExplainRequest:
    image: np.ndarray
    model: Model
    layer_id: str
    class_index: int
    cause_kind: str
    config: ExplainConfig

    def validate(self) -> None:
        check_class(self.model, self.class_index)
        if self.cause_kind not in CAUSE_KINDS:
            raise ConfigError(f"cause kind must be one of {CAUSE_KINDS}, got {self.cause_kind!r}")
        image = np.asarray(self.image)
        if image.shape != self.model.input_dims:
            raise ShapeError(f"image dims {list(image.shape)} != model input_dims {list(self.model.input_dims)}")
        if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
            raise ConfigError("image values must lie in [0, 1]")
        dims = self.model.output_dims(self.layer_id)
        if len(dims) != 3:
            raise ConfigError(f"layer {self.layer_id!r} produces dims {list(dims)}, not feature maps [K, h, w]")


@dataclass(frozen=True)
class CauseMask:
    grid: np.ndarray
    source_channel: int


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    direction: str


@dataclass
class ExplanationResult:
    n_map: SaliencyMap
    s_map: SaliencyMap
    n_report: ShapleyReport
    s_report: ShapleyReport
    p_orig: float
    class_index: int
    layer_id: str
    cause_kind: str
    seed: int
    n_singletons: dict[int, float] = field(default_factory=dict)
    s_singletons: dict[int, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# masks


def build_cause_mask(feature_map: np.ndarray, height: int, width: int, source_channel: int = 0) -> CauseMask:
    grid = minmax_norm(upsample_bilinear(np.asarray(feature_map, dtype=DTYPE), height, width))
    return CauseMask(grid, source_channel)


def coalition_mask(masks: Sequence[CauseMask | np.ndarray], height: int | None = None, width: int | None = None) -> np.ndarray:
    """Union of member masks (elementwise max); an empty coalition gives zeros."""
    grids = [m.grid if isinstance(m, CauseMask) else np.asarray(m) for m in masks]
    if not grids:
        if height is None or width is None:
            raise ShapeError("empty coalition mask needs explicit height and width")
        return np.zeros((height, width), dtype=DTYPE)
    shape = grids[0].shape
    if any(g.shape != shape for g in grids):
        raise ShapeError(f"coalition masks differ in dims: {[g.shape for g in grids]}")
    return np.maximum.reduce(grids).astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# executors


def _class_probs(model: Model, outputs: np.ndarray, class_index: int) -> np.ndarray:
    return probabilities(model, outputs)[:, class_index]


class FeatureExecutor:
    """Image-space interventions driven by per-channel masks."""

    def __init__(self, model: Model, image: np.ndarray, class_index: int, masks: np.ndarray, p_orig: float):
        self.model = model
        self.image = np.asarray(image, dtype=DTYPE)
        self.class_index = class_index
        self.masks = np.asarray(masks, dtype=DTYPE)
        self.p_orig = p_orig
        self.universe = frozenset(range(self.masks.shape[0]))
        self.forward_passes = 0

    def union(self, coalition: frozenset) -> np.ndarray:
        h, w = self.masks.shape[1:]
        return coalition_mask([self.masks[i] for i in sorted(coalition)], h, w)

    def removed_input(self, coalition: frozenset) -> np.ndarray:
        return hadamard(self.image, DTYPE(1) - self.union(coalition))

    def kept_input(self, coalition: frozenset) -> np.ndarray:
        return hadamard(self.image, self.union(coalition))

    def _run(self, coalitions: Sequence[frozenset], identity: frozenset, build) -> np.ndarray:
        out = np.empty(len(coalitions), dtype=np.float64)
        todo = []
        for row, c in enumerate(coalitions):
            if c == identity:
                out[row] = self.p_orig
            else:
                todo.append(row)
        for lo in range(0, len(todo), BATCH):
            rows = todo[lo : lo + BATCH]
            xs = np.stack([build(coalitions[r]) for r in rows])
            logits = run_layers(self.model, xs)
            self.forward_passes += len(rows)
            out[rows] = _class_probs(self.model, logits, self.class_index)
        return out

    def p_removed(self, coalitions: Sequence[frozenset]) -> np.ndarray:
        # removing nothing is the unmodified image
        return self._run(coalitions, frozenset(), self.removed_input)

    def p_kept(self, coalitions: Sequence[frozenset]) -> np.ndarray:
        # keeping every cause is no intervention at all
        return self._run(coalitions, self.universe, self.kept_input)


class FilterExecutor:
    """Model-space interventions: zeroing output channels of one conv layer."""

    def __init__(self, model: Model, image: np.ndarray, class_index: int, conv_id: str, p_orig: float):
        self.model = model
        self.class_index = class_index
        self.conv_id = conv_id
        self.conv_index = model.layer_index(conv_id)
        spec = model.layers[self.conv_index]
        if spec.kind != "conv2d":
            raise ConfigError(f"filter causes need a conv2d layer, {conv_id!r} is {spec.kind}")
        self.k = spec.params["out_channels"]
        self.universe = frozenset(range(self.k))
        self.p_orig = p_orig
        # activations up to and including the conv are unaffected by pruning it
        self.prefix = run_layers(model, np.asarray(image, dtype=DTYPE)[None], stop=self.conv_index + 1)
        self.forward_passes = 0

    def necessity_overlay(self, coalition: frozenset) -> FilterOverlay:
        return FilterOverlay(self.conv_id, frozenset(coalition))

    def sufficiency_overlay(self, coalition: frozenset) -> FilterOverlay:
        return FilterOverlay(self.conv_id, self.universe - frozenset(coalition))

    def _run(self, coalitions: Sequence[frozenset], zeroed_of) -> np.ndarray:
        out = np.empty(len(coalitions), dtype=np.float64)
        todo = []
        for row, c in enumerate(coalitions):
            if not zeroed_of(c):
                out[row] = self.p_orig
            else:
                todo.append(row)
        for lo in range(0, len(todo), BATCH):
            rows = todo[lo : lo + BATCH]
            keep = np.ones((len(rows), self.k), dtype=bool)
            for j, r in enumerate(rows):
                keep[j, sorted(zeroed_of(coalitions[r]))] = False
            acts = np.where(keep[:, :, None, None], self.prefix, DTYPE(0))
            logits = run_layers(self.model, acts, start=self.conv_index + 1)
            self.forward_passes += len(rows)
            out[rows] = _class_probs(self.model, logits, self.class_index)
        return out

    def p_removed(self, coalitions: Sequence[frozenset]) -> np.ndarray:
        return self._run(coalitions, lambda c: frozenset(c))

    def p_kept(self, coalitions: Sequence[frozenset]) -> np.ndarray:
        return self._run(coalitions, lambda c: self.universe - frozenset(c))


def filter_target(model: Model, layer_id: str) -> str:
    """The conv2d layer whose filters are pruned when explaining ``layer_id``.

    ``layer_id`` itself if it is a conv layer, else the nearest conv before it.
    """
    idx = model.layer_index(layer_id)
    for i in range(idx, -1, -1):
        if model.layers[i].kind == "conv2d":
            return model.layers[i].id
    raise ConfigError(f"no conv2d layer at or before {layer_id!r}")


def _feature_masks(feature_maps: np.ndarray, height: int, width: int) -> tuple[np.ndarray, list[int]]:
    masks = np.stack([build_cause_mask(a, height, width, i).grid for i, a in enumerate(feature_maps)])
    constant = [i for i, a in enumerate(feature_maps) if not a.max() > a.min()]
    return masks, constant


def feature_executor(request: ExplainRequest, p_orig: float | None = None) -> tuple[CoalitionValueFn, CoalitionValueFn]:
    if request.cause_kind != "feature":
        raise ConfigError("feature_executor needs cause_kind 'feature'")
    request.validate()
    ex = _make_feature_executor(request, p_orig)[0]
    return CoalitionValueFn.necessity(ex), CoalitionValueFn.sufficiency(ex)


def _make_feature_executor(request: ExplainRequest, p_orig: float | None):
    model = request.model
    if p_orig is None:
        p_orig = predict_prob(model, request.image, request.class_index)
    acts = activations_at(model, request.image, request.layer_id)
    _, h, w = model.input_dims
    masks, constant = _feature_masks(acts, h, w)
    return FeatureExecutor(model, request.image, request.class_index, masks, p_orig), acts, constant


def filter_executor(request: ExplainRequest, p_orig: float | None = None) -> tuple[CoalitionValueFn, CoalitionValueFn]:
    if request.cause_kind != "filter":
        raise ConfigError("filter_executor needs cause_kind 'filter'")
    request.validate()
    if p_orig is None:
        p_orig = predict_prob(request.model, request.image, request.class_index)
    ex = FilterExecutor(request.model, request.image, request.class_index, filter_target(request.model, request.layer_id), p_orig)
    return CoalitionValueFn.necessity(ex), CoalitionValueFn.sufficiency(ex)


# ---------------------------------------------------------------------------
# composition and the full pipeline


def compose_saliency(report: ShapleyReport, feature_maps: np.ndarray, height: int, width: int) -> SaliencyMap:
    """``norm(upsample(relu(sum_i R_i * A_i)))``; channels absent from the report weigh 0."""
    feature_maps = np.asarray(feature_maps, dtype=np.float64)
    k = feature_maps.shape[0]
    weights = np.zeros(k, dtype=np.float64)
    for cid, v in report.values.items():
        if not 0 <= cid < k:
            raise ShapeError(f"report cause {cid} outside the {k} feature maps")
        weights[cid] = v
    small = np.maximum(np.tensordot(weights, feature_maps, axes=1), 0.0)
    grid = minmax_norm(upsample_bilinear(small, height, width)).astype(DTYPE)
    return SaliencyMap(grid, report.direction)


def _shapley(fn: CoalitionValueFn, hyp: CauseUniverse, universe: CauseUniverse, config: ExplainConfig) -> ShapleyReport:
    if len(hyp) <= config.exact_threshold:
        report = shapley_exact(fn, hyp, universe)
    else:
        report = shapley_sampled(fn, hyp, config.permutations, config.seed, universe)
    report.seed = config.seed
    return report


def explain(request: ExplainRequest) -> ExplanationResult:
    request.validate()
    model, config = request.model, request.config
    warnings: list[str] = []

    p_orig = predict_prob(model, request.image, request.class_index)
    if p_orig <= EPS:
        warnings.append(f"original class probability {p_orig:.3g} <= {EPS:g}; N/S values use the {EPS:g} guard")

    if request.cause_kind == "feature":
        ex, acts, constant = _make_feature_executor(request, p_orig)
        if constant:
            warnings.append(f"constant feature maps at channels {constant} give all-zero masks")
    else:
        acts = activations_at(model, request.image, request.layer_id)
        ex = FilterExecutor(model, request.image, request.class_index, filter_target(model, request.layer_id), p_orig)
        if ex.k != acts.shape[0]:
            raise ConfigError(
                f"layer {request.layer_id!r} has {acts.shape[0]} channels but conv {ex.conv_id!r} has {ex.k} filters"
            )

    universe = CauseUniverse.of_size(acts.shape[0], request.cause_kind)
    nec = CoalitionValueFn.necessity(ex)
    suf = CoalitionValueFn.sufficiency(ex)
    e_n = singleton_scan(nec, universe)
    e_s = singleton_scan(suf, universe)
    f_n = select_hypothesized(e_n, config.k_n, request.cause_kind)
    f_s = select_hypothesized(e_s, config.k_s, request.cause_kind)
    n_report = _shapley(nec, f_n, universe, config)
    s_report = _shapley(suf, f_s, universe, config)

    _, h, w = model.input_dims
    return ExplanationResult(
        n_map=compose_saliency(n_report, acts, h, w),
        s_map=compose_saliency(s_report, acts, h, w),
        n_report=n_report,
        s_report=s_report,
        p_orig=p_orig,
        class_index=request.class_index,
        layer_id=request.layer_id,
        cause_kind=request.cause_kind,
        seed=config.seed,
        n_singletons=e_n,
        s_singletons=e_s,
        warnings=warnings,
    )
