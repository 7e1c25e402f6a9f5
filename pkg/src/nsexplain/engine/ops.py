"""Map-level tensor primitives: bilinear upsampling, min-max normalisation and
masked (Hadamard) products."""

from __future__ import annotations

import numpy as np

from nsexplain.errors import ShapeError


def _axis_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners: output index 0 -> source 0, output n_dst-1 -> source n_src-1
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst, dtype=np.float64)
    else:
        pos = np.arange(n_dst, dtype=np.float64) * (n_src - 1) / (n_dst - 1)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample_bilinear(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize the last two axes of ``src`` to ``(target_h, target_w)``.

    Uses align-corners bilinear interpolation, so the four corner pixels of the
    source land exactly on the corners of the output. Works for downscaling too.
    Leading axes (e.g. channels) are carried through unchanged. The result is
    clipped to the source extrema so rounding can never push a value outside
    ``[src.min(), src.max()]``.
    """
    src = np.asarray(src)
    if src.ndim < 2:
        raise ShapeError(f"upsample_bilinear needs at least 2 dims, got shape {src.shape}")
    h, w = src.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"source spatial dims must be >= 1, got {h}x{w}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target dims must be >= 1, got {target_h}x{target_w}")
    dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float32
    data = src.astype(np.float64, copy=False)

    r0, r1, rf = _axis_weights(h, target_h)
    c0, c1, cf = _axis_weights(w, target_w)

    rows = data[..., r0, :] + (data[..., r1, :] - data[..., r0, :]) * rf[:, None]
    out = rows[..., c0] + (rows[..., c1] - rows[..., c0]) * cf
    out = np.clip(out, data.min(), data.max())
    return out.astype(dtype)


def minmax_norm(src: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] as ``(x - min) / (max - min)``.

    A constant input carries no spatial information and maps to all zeros.
    """
    src = np.asarray(src)
    if src.size == 0:
        raise ShapeError("minmax_norm on an empty tensor")
    dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float32
    data = src.astype(np.float64, copy=False)
    lo, hi = data.min(), data.max()
    if not hi > lo:
        return np.zeros(src.shape, dtype=dtype)
    out = (data - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(dtype)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; a 2-D ``b`` is broadcast across the channels of a 3-D ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape == b.shape:
        return a * b
    if a.ndim == 3 and b.ndim == 2 and a.shape[1:] == b.shape:
        return a * b[None, :, :]
    raise ShapeError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")
