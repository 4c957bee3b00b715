"""Grayscale image loading, saving and deterministic bilinear resampling."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from aeroloc.errors import DataFormatError


def load_gray(path: str | Path) -> np.ndarray:
    """Load an image as a float64 grayscale array in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: cannot read image: {exc}") from exc
    return arr / 255.0


def save_gray(path: str | Path, arr: np.ndarray) -> None:
    """Save a [0, 1] float array as an 8-bit grayscale PNG."""
    data = np.clip(np.asarray(arr) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre coordinates."""
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.astype(np.float64, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def central_square_crop(arr: np.ndarray) -> np.ndarray:
    """Crop the largest centred square from an image."""
    h, w = arr.shape
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    return arr[y0 : y0 + side, x0 : x0 + side]
