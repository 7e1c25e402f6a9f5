"""Image and saliency-map file ingestion."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from nsexplain.engine import DTYPE, upsample_bilinear
from nsexplain.errors import ConfigError, ShapeError

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def preprocess_image(path: str | Path, input_dims: tuple[int, int, int]) -> np.ndarray:
    """Decode a PNG/PPM, resize (align-corners bilinear) to the model's spatial
    dims and scale to [0, 1]. Grayscale images are replicated across channels."""
    channels, height, width = input_dims
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1"):
                arr = np.asarray(im.convert("F"), dtype=np.float64)
                scale = 65535.0 if im.mode.startswith("I;16") else 255.0
                data = (arr / scale)[None]
            else:
                data = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None

    if data.shape[0] != channels:
        if data.shape[0] == 1:
            data = np.repeat(data, channels, axis=0)
        else:
            raise ShapeError(f"image {path} has {data.shape[0]} channels; model expects {channels}")
    if data.shape[1:] != (height, width):
        data = upsample_bilinear(data, height, width)
    return np.clip(data, 0.0, 1.0).astype(DTYPE)


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_map(path: str | Path, height: int, width: int) -> np.ndarray:
    """Load an externally produced saliency map (grayscale PNG or JSON grid) and
    bring it to ``height x width``."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        payload = json.loads(path.read_text())
        grid = payload.get("grid", payload.get("s_grid")) if isinstance(payload, dict) else payload
        grid = np.asarray(grid, dtype=np.float64)
    else:
        with Image.open(path) as im:
            grid = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if grid.ndim != 2:
        raise ShapeError(f"saliency map {path} must be 2-d, got dims {list(grid.shape)}")
    if grid.shape != (height, width):
        grid = upsample_bilinear(grid, height, width)
    return grid.astype(DTYPE)


def find_map(maps_dir: str | Path, image_path: Path) -> Path | None:
    for suffix in (".json", ".png"):
        cand = Path(maps_dir) / (image_path.stem + suffix)
        if cand.exists():
            return cand
    return None
