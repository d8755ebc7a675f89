"""Bilinear resampling with the half-pixel-center convention.

Source coordinate for destination pixel d is (d + 0.5) * (in/out) - 0.5,
clamped to the valid range, then blended from the four integer neighbors.
Exact on constant maps and the identity when sizes match; shared by image
loading and heatmap upsampling so both sides agree bit for bit.
"""

from __future__ import annotations

import numpy as np


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0.0, n_in - 1)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-d map or channels-last 3-d image to (out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected a 2-d map or 3-d image, got ndim {arr.ndim}")
    h, w = arr.shape[:2]
    ys = _source_coords(h, out_h)
    xs = _source_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bottom = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy
