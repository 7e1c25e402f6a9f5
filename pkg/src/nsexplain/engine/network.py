"""Chain-CNN inference in NumPy.

All layer kernels operate on a leading batch axis internally so that the
explainer can push many intervened inputs through the network at once. The
single-sample functions (``conv2d``, ``layer_forward``, ``forward`` ...) are thin
wrappers that add and strip that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nsexplain.errors import ShapeError, UnknownLayerError

DTYPE = np.float32

LAYER_KINDS = frozenset(
    {"conv2d", "relu", "maxpool2d", "global_avg_pool", "flatten", "dense", "softmax"}
)
PARAMETERIZED_KINDS = frozenset({"conv2d", "dense"})


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {self.id!r}: unsupported layer kind {self.kind!r}")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


@dataclass(frozen=True)
class FilterOverlay:
    """Forces a set of output channels of one conv2d layer to zero.

    Equivalent to zeroing those filters' weights and biases, without touching
    the model.
    """

    layer_id: str
    zeroed_channels: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "zeroed_channels", frozenset(int(c) for c in self.zeroed_channels))


# ---------------------------------------------------------------------------
# batched kernels


def _conv2d_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [N, C, H', W', kh, kw] view, subsampled by stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_c * kh * kw)
    out = cols @ weight.reshape(out_c, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))


def _maxpool_batch(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def _softmax(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 0:
        raise ShapeError("softmax on an empty vector")
    x = x.astype(np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_layer(spec: LayerSpec, x: np.ndarray, weights: Mapping[str, np.ndarray] | None) -> np.ndarray:
    p = spec.params
    kind = spec.kind
    if kind == "conv2d":
        return _conv2d_batch(x, weights["weight"], weights["bias"], p.get("stride", 1), p.get("padding", 0))
    if kind == "relu":
        return np.maximum(x, 0, dtype=x.dtype)
    if kind == "maxpool2d":
        window = p["window"]
        return _maxpool_batch(x, window, p.get("stride", window))
    if kind == "global_avg_pool":
        return x.mean(axis=(2, 3), dtype=x.dtype)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "dense":
        out = x @ weights["weight"].T
        out += weights["bias"]
        return out
    if kind == "softmax":
        return _softmax(x).astype(x.dtype)
    raise ShapeError(f"layer {spec.id!r}: unsupported layer kind {kind!r}")


def _output_dims(spec: LayerSpec, dims: tuple[int, ...]) -> tuple[int, ...]:
    """Shape inference; raises ShapeError naming the layer on mismatch."""
    p = spec.params
    kind = spec.kind

    def need(ndim: int) -> None:
        if len(dims) != ndim:
            raise ShapeError(f"layer {spec.id!r} ({kind}) expects a {ndim}-d input, got dims {list(dims)}")

    if kind == "conv2d":
        need(3)
        c, h, w = dims
        if p["in_channels"] != c:
            raise ShapeError(f"layer {spec.id!r}: in_channels={p['in_channels']} but input has {c} channels")
        stride, pad = p.get("stride", 1), p.get("padding", 0)
        if stride < 1 or pad < 0:
            raise ShapeError(f"layer {spec.id!r}: need stride >= 1 and padding >= 0")
        ho = (h + 2 * pad - p["kernel_h"]) // stride + 1
        wo = (w + 2 * pad - p["kernel_w"]) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {spec.id!r}: kernel larger than padded input {h}x{w}")
        return (p["out_channels"], ho, wo)
    if kind == "maxpool2d":
        need(3)
        c, h, w = dims
        window = p["window"]
        stride = p.get("stride", window)
        if window > h or window > w:
            raise ShapeError(f"layer {spec.id!r}: pool window {window} larger than input {h}x{w}")
        return (c, (h - window) // stride + 1, (w - window) // stride + 1)
    if kind == "global_avg_pool":
        need(3)
        return (dims[0],)
    if kind == "flatten":
        return (int(np.prod(dims)),)
    if kind == "dense":
        need(1)
        if p["in_features"] != dims[0]:
            raise ShapeError(f"layer {spec.id!r}: in_features={p['in_features']} but input has {dims[0]} features")
        return (p["out_features"],)
    return dims


def _expected_param_dims(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    p = spec.params
    if spec.kind == "conv2d":
        return {
            "weight": (p["out_channels"], p["in_channels"], p["kernel_h"], p["kernel_w"]),
            "bias": (p["out_channels"],),
        }
    if spec.kind == "dense":
        return {"weight": (p["out_features"], p["in_features"]), "bias": (p["out_features"],)}
    return {}


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class Model:
    """An immutable chain of layers with float32 weights.

    ``weights`` maps a layer id to ``{"weight": array, "bias": array}`` for
    every conv2d and dense layer.
    """

    layers: tuple[LayerSpec, ...]
    weights: Mapping[str, Mapping[str, np.ndarray]]
    input_dims: tuple[int, int, int]
    class_count: int

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("model has no layers")
        ids = [spec.id for spec in layers]
        if len(set(ids)) != len(ids):
            raise ShapeError(f"duplicate layer ids in {ids}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ShapeError(f"input_dims must be [channels, height, width], got {list(self.input_dims)}")

        frozen: dict[str, Mapping[str, np.ndarray]] = {}
        dims: tuple[int, ...] = tuple(int(d) for d in self.input_dims)
        shapes = []
        for spec in layers:
            expected = _expected_param_dims(spec)
            if expected:
                given = self.weights.get(spec.id)
                if given is None:
                    raise ShapeError(f"layer {spec.id!r}: missing weights")
                arrays = {}
                for name, want in expected.items():
                    if name not in given:
                        raise ShapeError(f"layer {spec.id!r}: missing {name}")
                    arr = np.array(given[name], dtype=DTYPE, copy=True)
                    if arr.shape != want:
                        raise ShapeError(
                            f"layer {spec.id!r}: {name} dims {list(arr.shape)} != expected {list(want)}"
                        )
                    if not np.all(np.isfinite(arr)):
                        raise ShapeError(f"layer {spec.id!r}: non-finite values in {name}")
                    arr.setflags(write=False)
                    arrays[name] = arr
                frozen[spec.id] = MappingProxyType(arrays)
            dims = _output_dims(spec, dims)
            shapes.append(dims)
        if dims != (self.class_count,):
            raise ShapeError(f"final layer output dims {list(dims)} != [class_count={self.class_count}]")

        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "weights", MappingProxyType(frozen))
        object.__setattr__(self, "_shapes", tuple(shapes))
        object.__setattr__(self, "_index", {spec.id: i for i, spec in enumerate(layers)})

    def layer_index(self, layer_id: str) -> int:
        try:
            return self._index[layer_id]
        except KeyError:
            raise UnknownLayerError(f"unknown layer id {layer_id!r}; known: {list(self._index)}") from None

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self.layer_index(layer_id)]

    def output_dims(self, layer_id: str) -> tuple[int, ...]:
        return self._shapes[self.layer_index(layer_id)]

    @property
    def parameterized_layers(self) -> list[str]:
        return [spec.id for spec in self.layers if spec.kind in PARAMETERIZED_KINDS]

    @property
    def ends_with_softmax(self) -> bool:
        return self.layers[-1].kind == "softmax"

    def with_weights(self, updates: Mapping[str, Mapping[str, np.ndarray]]) -> "Model":
        """Return a new model with some layers' weights replaced."""
        merged = {k: dict(v) for k, v in self.weights.items()}
        for layer_id, arrays in updates.items():
            self.layer_index(layer_id)
            merged.setdefault(layer_id, {}).update(arrays)
        return Model(self.layers, merged, self.input_dims, self.class_count)

    def zeroed(self, overlay: FilterOverlay) -> "Model":
        """Literal weight-zeroing counterpart of ``overlay`` (used to check overlay soundness)."""
        conv = self._overlay_target(overlay)
        keep = np.ones(self.layers[conv].params["out_channels"], dtype=bool)
        keep[list(overlay.zeroed_channels)] = False
        w = self.weights[overlay.layer_id]
        return self.with_weights(
            {overlay.layer_id: {"weight": w["weight"] * keep[:, None, None, None], "bias": w["bias"] * keep}}
        )

    def _overlay_target(self, overlay: FilterOverlay) -> int:
        idx = self.layer_index(overlay.layer_id)
        spec = self.layers[idx]
        if spec.kind != "conv2d":
            raise UnknownLayerError(f"overlay layer {overlay.layer_id!r} is a {spec.kind} layer, not conv2d")
        k = spec.params["out_channels"]
        bad = [c for c in overlay.zeroed_channels if not 0 <= c < k]
        if bad:
            raise ShapeError(f"overlay channels {sorted(bad)} out of range [0, {k}) for layer {overlay.layer_id!r}")
        return idx


def run_layers(
    model: Model,
    x: np.ndarray,
    start: int = 0,
    stop: int | None = None,
    channel_keep: Mapping[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Apply layers ``start:stop`` to a batch ``x``.

    ``channel_keep`` maps a conv2d layer index to a boolean array of shape
    ``[K]`` or ``[N, K]``; channels marked False are replaced by exact zeros
    right after that layer.
    """
    stop = len(model.layers) if stop is None else stop
    x = np.asarray(x, dtype=DTYPE)
    for i in range(start, stop):
        spec = model.layers[i]
        x = _apply_layer(spec, x, model.weights.get(spec.id))
        if channel_keep and i in channel_keep:
            keep = np.asarray(channel_keep[i], dtype=bool)
            keep = keep[None, :] if keep.ndim == 1 else keep
            x = np.where(keep[:, :, None, None], x, DTYPE(0))
    return x


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != model.input_dims:
        raise ShapeError(f"input dims {list(x.shape)} != model input_dims {list(model.input_dims)}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite values")
    return x


def _overlay_keep(model: Model, overlays: Sequence[FilterOverlay | None]) -> dict[int, np.ndarray]:
    keep: dict[int, np.ndarray] = {}
    n = len(overlays)
    for row, overlay in enumerate(overlays):
        if overlay is None:
            continue
        idx = model._overlay_target(overlay)
        if idx not in keep:
            keep[idx] = np.ones((n, model.layers[idx].params["out_channels"]), dtype=bool)
        keep[idx][row, list(overlay.zeroed_channels)] = False
    return keep


def forward(model: Model, x: np.ndarray, overlay: FilterOverlay | None = None) -> np.ndarray:
    """Logits (output of the last layer) for a single ``[C, H, W]`` input."""
    x = _check_input(model, x)
    keep = _overlay_keep(model, [overlay]) if overlay is not None else None
    return run_layers(model, x[None], channel_keep=keep)[0]


def forward_batch(
    model: Model,
    xs: np.ndarray,
    overlays: Sequence[FilterOverlay | None] | None = None,
    chunk: int = 64,
) -> np.ndarray:
    """Outputs for a stack of inputs ``[N, C, H, W]``, processed ``chunk`` at a time."""
    xs = np.asarray(xs, dtype=DTYPE)
    if xs.ndim != 4 or xs.shape[1:] != model.input_dims:
        raise ShapeError(f"batch dims {list(xs.shape)} != [N, *{list(model.input_dims)}]")
    outs = []
    for lo in range(0, xs.shape[0], chunk):
        part = xs[lo : lo + chunk]
        keep = None
        if overlays is not None:
            keep = _overlay_keep(model, overlays[lo : lo + chunk])
        outs.append(run_layers(model, part, channel_keep=keep))
    return np.concatenate(outs, axis=0)


def activations_at(model: Model, x: np.ndarray, layer_id: str) -> np.ndarray:
    """Output of ``layer_id`` under the same semantics as :func:`forward`."""
    idx = model.layer_index(layer_id)
    x = _check_input(model, x)
    return run_layers(model, x[None], stop=idx + 1)[0]


def probabilities(model: Model, logits: np.ndarray) -> np.ndarray:
    """Class probabilities (float64) from model outputs, last axis = classes."""
    if model.ends_with_softmax:
        return np.asarray(logits, dtype=np.float64)
    return _softmax(np.asarray(logits))


def predict_prob(model: Model, x: np.ndarray, class_index: int, overlay: FilterOverlay | None = None) -> float:
    check_class(model, class_index)
    return float(probabilities(model, forward(model, x, overlay))[class_index])


def check_class(model: Model, class_index: int) -> None:
    if not 0 <= class_index < model.class_count:
        raise ShapeError(f"class index {class_index} out of range [0, {model.class_count})")


# ---------------------------------------------------------------------------
# single-sample wrappers over the batched kernels


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x [C_in, H, W]`` with ``weights [C_out, C_in, kh, kw]``."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [C, H, W], got dims {list(x.shape)}")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d weights must be 4-d, got dims {list(weights.shape)}")
    if weights.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d in_channels: weights expect {weights.shape[1]}, input has {x.shape[0]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"conv2d bias dims {list(bias.shape)} != [{weights.shape[0]}]")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if weights.shape[2] > x.shape[1] + 2 * pad:
        raise ShapeError(f"conv2d kernel_h {weights.shape[2]} exceeds padded height {x.shape[1] + 2 * pad}")
    if weights.shape[3] > x.shape[2] + 2 * pad:
        raise ShapeError(f"conv2d kernel_w {weights.shape[3]} exceeds padded width {x.shape[2] + 2 * pad}")
    return _conv2d_batch(x[None], weights, bias, stride, pad)[0]


def layer_forward(
    kind: str,
    x: np.ndarray,
    params: Mapping[str, Any] | None = None,
    weights: Mapping[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Evaluate one layer on a single (unbatched) input."""
    spec = LayerSpec(id=kind, kind=kind, params=params or {})
    x = np.asarray(x, dtype=DTYPE)
    _output_dims(spec, x.shape)
    if kind == "softmax" and x.size == 0:
        raise ShapeError("softmax on an empty vector")
    if weights is not None:
        weights = {k: np.asarray(v, dtype=DTYPE) for k, v in weights.items()}
    return _apply_layer(spec, x[None], weights)[0]


def build_model(
    layers: Iterable[tuple[str, str, Mapping[str, int]]],
    weights: Mapping[str, Mapping[str, np.ndarray]],
    input_dims: Sequence[int],
    class_count: int,
) -> Model:
    """Convenience constructor from ``(id, kind, params)`` triples."""
    specs = tuple(LayerSpec(i, k, p) for i, k, p in layers)
    return Model(specs, weights, tuple(input_dims), class_count)
