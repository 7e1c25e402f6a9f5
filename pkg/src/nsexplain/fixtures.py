"""Hand-built models and images with a known decisive region.

The planted-feature model is a two-class chain CNN over 3x32x32 inputs. Its
class-1 logit reads a single "redness" channel at the four pooled positions
covering :data:`PATCH_BBOX`, and every layer on that path uses centre-only
kernels, so the logit depends on no pixel outside the 8x8 patch. Class 0 reads
overall brightness.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from nsexplain.engine import Model, build_model

SIZE = 32
# (x0, y0, x1, y1), half-open, in the top-right quadrant and aligned to the 4x pooling
PATCH_BBOX = (20, 4, 28, 12)
PATCH_COLOR = (0.9, 0.1, 0.1)


def planted_feature_model() -> Model:
    c1 = np.zeros((4, 3, 3, 3), dtype=np.float32)
    b1 = np.zeros(4, dtype=np.float32)
    # 0: redness R - G - B (centre tap), thresholded so a dimmed patch stops firing
    c1[0, :, 1, 1] = [10.0, -10.0, -10.0]
    b1[0] = -5.5
    # 1: local brightness
    c1[1] = 1.0 / 27.0
    # 2: greenness
    c1[2, :, 1, 1] = [-2.0, 4.0, -2.0]
    # 3: vertical edges in brightness
    c1[3, :, :, 0] = -1.0 / 9.0
    c1[3, :, :, 2] = 1.0 / 9.0

    c2 = np.zeros((6, 4, 3, 3), dtype=np.float32)
    b2 = np.zeros(6, dtype=np.float32)
    c2[0, 0, 1, 1] = 1.0  # red detector passthrough
    c2[1, 1] = 1.0 / 9.0  # smoothed brightness
    c2[2, 2, 1, 1] = 1.0
    c2[3, 3, 1, 1] = 1.0
    c2[4, 1, 1, 1] = 1.0  # brightness minus redness
    c2[4, 0, 1, 1] = -0.5
    c2[5, :, 1, 1] = -1.0  # never fires on non-negative inputs
    b2[5] = -0.1

    fc = np.zeros((2, 6 * 8 * 8), dtype=np.float32)
    fcb = np.array([0.0, -3.0], dtype=np.float32)
    x0, y0, x1, y1 = PATCH_BBOX
    red = np.zeros((6, 8, 8), dtype=np.float32)
    red[0, y0 // 4 : y1 // 4, x0 // 4 : x1 // 4] = 1.0
    fc[1] = red.ravel()
    bright = np.zeros((6, 8, 8), dtype=np.float32)
    bright[1] = 1.0 / 64.0
    fc[0] = bright.ravel()

    layers = [
        ("conv1", "conv2d", dict(out_channels=4, in_channels=3, kernel_h=3, kernel_w=3, stride=1, padding=1)),
        ("relu1", "relu", {}),
        ("pool1", "maxpool2d", dict(window=2, stride=2)),
        ("conv2", "conv2d", dict(out_channels=6, in_channels=4, kernel_h=3, kernel_w=3, stride=1, padding=1)),
        ("relu2", "relu", {}),
        ("pool2", "maxpool2d", dict(window=2, stride=2)),
        ("flatten", "flatten", {}),
        ("fc", "dense", dict(out_features=2, in_features=6 * 8 * 8)),
    ]
    weights = {
        "conv1": {"weight": c1, "bias": b1},
        "conv2": {"weight": c2, "bias": b2},
        "fc": {"weight": fc, "bias": fcb},
    }
    return build_model(layers, weights, (3, SIZE, SIZE), 2)


def planted_image(seed: int, with_patch: bool = True) -> np.ndarray:
    """Grey noisy background, optionally with the red patch at :data:`PATCH_BBOX`."""
    rng = np.random.default_rng(seed)
    grey = rng.uniform(0.5, 0.9, size=(SIZE, SIZE))
    img = grey[None] + rng.uniform(-0.03, 0.03, size=(3, SIZE, SIZE))
    if with_patch:
        x0, y0, x1, y1 = PATCH_BBOX
        color = np.array(PATCH_COLOR)[:, None, None]
        img[:, y0:y1, x0:x1] = color + rng.uniform(-0.01, 0.01, size=(3, y1 - y0, x1 - x0))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def tiny_model(seed: int = 0) -> Model:
    """Small random model mixing every layer kind (used for oracle checks)."""
    rng = np.random.default_rng(seed)
    layers = [
        ("c1", "conv2d", dict(out_channels=3, in_channels=2, kernel_h=3, kernel_w=2, stride=2, padding=1)),
        ("r1", "relu", {}),
        ("p1", "maxpool2d", dict(window=2, stride=1)),
        ("c2", "conv2d", dict(out_channels=4, in_channels=3, kernel_h=2, kernel_w=2, stride=1, padding=0)),
        ("r2", "relu", {}),
        ("gap", "global_avg_pool", {}),
        ("d1", "dense", dict(out_features=3, in_features=4)),
    ]
    weights = {
        "c1": {"weight": rng.normal(0, 0.5, (3, 2, 3, 2)), "bias": rng.normal(0, 0.1, 3)},
        "c2": {"weight": rng.normal(0, 0.5, (4, 3, 2, 2)), "bias": rng.normal(0, 0.1, 4)},
        "d1": {"weight": rng.normal(0, 1.0, (3, 4)), "bias": rng.normal(0, 0.1, 3)},
    }
    return build_model(layers, weights, (2, 9, 8), 3)


def write_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def write_demo(out_dir: str | Path, n_images: int = 10, seed: int = 0) -> Path:
    """Write the planted-feature model, ``n_images`` PNGs and a bbox file under ``out_dir``."""
    import json

    from nsexplain.engine import model_io

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    model_io.save(planted_feature_model(), out / "model")
    x0, y0, x1, y1 = PATCH_BBOX
    lines = []
    for i in range(n_images):
        name = f"img_{i:02d}.png"
        write_png(planted_image(seed + i), out / "images" / name)
        lines.append(json.dumps({"image": name, "x0": x0, "y0": y0, "x1": x1, "y1": y1}))
    (out / "bboxes.jsonl").write_text("\n".join(lines) + "\n")
    return out
