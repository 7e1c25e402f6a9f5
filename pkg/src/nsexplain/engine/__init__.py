"""Minimal deterministic CNN inference engine."""

from nsexplain.engine.network import (
    DTYPE,
    FilterOverlay,
    LayerSpec,
    Model,
    activations_at,
    build_model,
    check_class,
    conv2d,
    forward,
    forward_batch,
    layer_forward,
    predict_prob,
    probabilities,
    run_layers,
)
from nsexplain.engine.ops import hadamard, minmax_norm, upsample_bilinear

__all__ = [
    "DTYPE",
    "FilterOverlay",
    "LayerSpec",
    "Model",
    "activations_at",
    "build_model",
    "check_class",
    "conv2d",
    "forward",
    "forward_batch",
    "hadamard",
    "layer_forward",
    "minmax_norm",
    "predict_prob",
    "probabilities",
    "run_layers",
    "upsample_bilinear",
]
