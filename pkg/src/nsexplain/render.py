"""Writes explanation artifacts: grayscale maps, heat overlays, the bivariate
N/S image and a JSON dump."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from nsexplain.explainer import ExplanationResult

BIVARIATE_ENCODING = "red = necessity, blue = sufficiency, green = 0; each channel round(255 * value)"
OUTPUT_FILES = ("n_map.png", "s_map.png", "overlay_n.png", "overlay_s.png", "bivariate.png", "result.json")
OVERLAY_ALPHA = 0.5


def to_u8(grid: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def image_rgb(image: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` in [0, 1] -> ``[H, W, 3]`` float; single channels are replicated."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    elif image.shape[0] != 3:
        image = np.repeat(image.mean(axis=0, keepdims=True), 3, axis=0)
    return image.transpose(1, 2, 0)


def heat_overlay(grid: np.ndarray, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    from matplotlib import colormaps

    heat = colormaps["jet"](np.clip(grid, 0.0, 1.0))[..., :3]
    blend = (1.0 - alpha) * image_rgb(image) + alpha * heat
    return to_u8(blend)


def bivariate(n_grid: np.ndarray, s_grid: np.ndarray) -> np.ndarray:
    n8, s8 = to_u8(n_grid), to_u8(s_grid)
    return np.stack([n8, np.zeros_like(n8), s8], axis=-1)


def result_dict(result: ExplanationResult) -> dict:
    return {
        "p_orig": result.p_orig,
        "class_index": result.class_index,
        "layer_id": result.layer_id,
        "cause_kind": result.cause_kind,
        "seed": result.seed,
        "n_values": {str(k): v for k, v in result.n_report.values.items()},
        "s_values": {str(k): v for k, v in result.s_report.values.items()},
        "n_grid": np.asarray(result.n_map.grid, dtype=np.float64).tolist(),
        "s_grid": np.asarray(result.s_map.grid, dtype=np.float64).tolist(),
        "warnings": list(result.warnings),
        "n_report": result.n_report.to_dict(),
        "s_report": result.s_report.to_dict(),
        "bivariate_encoding": BIVARIATE_ENCODING,
    }


def render(result: ExplanationResult, image: np.ndarray, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in OUTPUT_FILES]
    n_grid, s_grid = result.n_map.grid, result.s_map.grid
    Image.fromarray(to_u8(n_grid), mode="L").save(paths[0])
    Image.fromarray(to_u8(s_grid), mode="L").save(paths[1])
    Image.fromarray(heat_overlay(n_grid, image), mode="RGB").save(paths[2])
    Image.fromarray(heat_overlay(s_grid, image), mode="RGB").save(paths[3])
    Image.fromarray(bivariate(n_grid, s_grid), mode="RGB").save(paths[4])
    paths[5].write_text(json.dumps(result_dict(result), indent=1) + "\n")
    return paths
