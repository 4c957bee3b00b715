"""Dense feature grids extracted from images.

A :class:`DenseFeatureMap` is an ``h x w x c`` grid of feature vectors with
stride metadata linking grid cells back to source-image pixels: cell
``(i, j)`` covers pixels ``[j*r, (j+1)*r) x [i*r, (i+1)*r)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aeroloc.errors import ContractViolationError, DimensionMismatchError


@dataclass(frozen=True)
class DenseFeatureMap:
    """Immutable dense feature grid with pixel-stride metadata.

    Parameters
    ----------
    data:
        Array of shape ``(h, w, c)``, finite values.
    stride:
        Pixels per grid cell (``>= 1``).
    source_width, source_height:
        Dimensions of the image the grid was extracted from.  The grid must
        tile the source: ``h * stride <= source_height + stride`` and the
        same along x.
    """

    data: np.ndarray
    stride: int
    source_width: int
    source_height: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatchError(f"feature map must be h x w x c, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c < 1:
            raise DimensionMismatchError("feature map dimensions must all be >= 1")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("feature map contains non-finite values")
        if self.stride < 1:
            raise ContractViolationError("stride must be >= 1")
        if h * self.stride > self.source_height + self.stride:
            raise ContractViolationError(
                f"grid of {h} cells at stride {self.stride} does not tile "
                f"source height {self.source_height}"
            )
        if w * self.stride > self.source_width + self.stride:
            raise ContractViolationError(
                f"grid of {w} cells at stride {self.stride} does not tile "
                f"source width {self.source_width}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cell_rect_px(self, i: int, j: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (x0, y0, x1, y1) covered by cell (i, j), clipped to the source."""
        r = self.stride
        x0, y0 = j * r, i * r
        x1 = min((j + 1) * r, self.source_width)
        y1 = min((i + 1) * r, self.source_height)
        return (x0, y0, x1, y1)


def check_feature_pair(fu: DenseFeatureMap, fs: DenseFeatureMap) -> None:
    """Validate that two maps can be correlated (equal channel counts)."""
    if fu.channels != fs.channels:
        raise DimensionMismatchError(
            f"channel mismatch: {fu.channels} vs {fs.channels}"
        )


def check_tensor4d(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a 4D match-score tensor: rank 4, finite values."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionMismatchError(f"{name} must be rank 4, got rank {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError(f"{name} contains non-finite values")
    return arr


def check_nonnegative(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    arr = check_tensor4d(t, name)
    if np.any(arr < 0):
        raise ContractViolationError(f"{name} contains negative entries")
    return arr
