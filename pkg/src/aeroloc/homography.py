"""Robust planar homography estimation from point correspondences.

Minimal 4-point samples are solved with the normalized direct linear
transform; inliers are judged by symmetric transfer error (forward plus
backward reprojection), which is more stable than one-way reprojection for
projective warps.  All randomness flows from the caller's seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, log

import numpy as np

from aeroloc.errors import (
    ContractViolationError,
    HomographyEstimationError,
    ProjectionError,
)
from aeroloc.fine import FineConfig, PointMatchSet

_W_EPS = 1e-12


@dataclass(frozen=True)
class Homography:
    """Invertible 3x3 projective transform, scaled so the (2,2) entry is 1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ContractViolationError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ContractViolationError("homography has non-finite entries")
        if abs(np.linalg.det(m)) < 1e-15:
            raise ContractViolationError("homography is singular")
        if abs(m[2, 2]) > _W_EPS:
            m = m / m[2, 2]
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an (n, 2) point array; raises if any point maps to infinity."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        q = np.column_stack([pts, np.ones(len(pts))]) @ self.matrix.T
        w = q[:, 2]
        if np.any(np.abs(w) < _W_EPS):
            raise ProjectionError("point maps to infinity")
        return q[:, :2] / w[:, None]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def project_center(h: Homography, point: tuple[float, float]) -> tuple[float, float]:
    """Project a single pixel point through ``h`` (homogeneous divide)."""
    out = h.apply(np.array([point]))
    return (float(out[0, 0]), float(out[0, 1]))


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(dist, 1e-12)
    T = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1.0]]
    )
    pn = (pts - centroid) * scale
    return pn, T


def _dlt(pa: np.ndarray, pb: np.ndarray) -> np.ndarray | None:
    """Least-squares homography on pre-normalized points, or None if degenerate."""
    n = len(pa)
    x, y = pa[:, 0], pa[:, 1]
    u, v = pb[:, 0], pb[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    a[1::2] = np.column_stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v])
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-10:
        return None
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < _W_EPS:
        return None
    return h / h[2, 2]


def _fit_points(pa: np.ndarray, pb: np.ndarray) -> np.ndarray | None:
    pan, ta = _normalize_points(pa)
    pbn, tb = _normalize_points(pb)
    hn = _dlt(pan, pbn)
    if hn is None:
        return None
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) < _W_EPS or abs(np.linalg.det(h)) < 1e-15:
        return None
    return h / h[2, 2]


def _has_collinear_triple(pts: np.ndarray, eps: float = 1e-3) -> bool:
    pn, _ = _normalize_points(pts)
    idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    for i, j, k in idx:
        u = pn[j] - pn[i]
        v = pn[k] - pn[i]
        area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
        if area < eps:
            return True
    return False


def _symmetric_transfer_error(h: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    h_inv = np.linalg.inv(h)

    def _proj(m, pts):
        q = np.column_stack([pts, np.ones(len(pts))]) @ m.T
        w = q[:, 2:3]
        safe = np.where(np.abs(w) < _W_EPS, np.inf, w)
        return q[:, :2] / safe

    fwd = np.linalg.norm(_proj(h, pa) - pb, axis=1)
    bwd = np.linalg.norm(_proj(h_inv, pb) - pa, axis=1)
    err = fwd + bwd
    return np.where(np.isfinite(err), err, np.inf)


def estimate_homography_ransac(
    matches: PointMatchSet,
    cfg: FineConfig | None = None,
    seed: int = 0,
) -> tuple[Homography, np.ndarray]:
    """Seeded RANSAC homography with a final least-squares refit.

    Inliers have symmetric transfer error below ``cfg.ransac_threshold``.
    The iteration budget adapts from the best inlier ratio up to
    ``cfg.ransac_max_iters``; the best model is chosen by (more inliers,
    lower mean inlier error, earlier trial).  The refit on the inlier set is
    kept only when it does not increase the mean inlier error.

    Raises :class:`HomographyEstimationError` with fewer than 4 matches or
    when every sample is degenerate.
    """
    cfg = cfg or FineConfig()
    pa = np.asarray(matches.pts_a, dtype=np.float64)
    pb = np.asarray(matches.pts_b, dtype=np.float64)
    n = len(pa)
    if n < 4:
        raise HomographyEstimationError(f"need at least 4 matches, got {n}")

    rng = np.random.default_rng(seed)
    thresh = cfg.ransac_threshold
    best_h = None
    best_count = -1
    best_err = np.inf
    needed = cfg.ransac_max_iters
    trial = 0
    while trial < min(cfg.ransac_max_iters, needed):
        trial += 1
        idx = rng.choice(n, size=4, replace=False) if n > 4 else np.arange(4)
        sa, sb = pa[idx], pb[idx]
        if _has_collinear_triple(sa) or _has_collinear_triple(sb):
            continue
        h = _fit_points(sa, sb)
        if h is None:
            continue
        err = _symmetric_transfer_error(h, pa, pb)
        inl = err < thresh
        count = int(inl.sum())
        if count < 4:
            continue
        mean_err = float(err[inl].mean())
        if count > best_count or (count == best_count and mean_err < best_err):
            best_h, best_count, best_err = h, count, mean_err
            ratio = count / n
            if 0 < ratio < 1:
                denom = log(1.0 - ratio**4)
                if denom < 0:
                    needed = ceil(log(1.0 - cfg.ransac_confidence) / denom)
            elif ratio >= 1:
                needed = trial

    if best_h is None:
        raise HomographyEstimationError(
            f"no valid homography from {n} matches after {trial} trials (degenerate samples)"
        )

    inlier_mask = _symmetric_transfer_error(best_h, pa, pb) < thresh
    refit = _fit_points(pa[inlier_mask], pb[inlier_mask]) if inlier_mask.sum() >= 4 else None
    if refit is not None:
        pre = _symmetric_transfer_error(best_h, pa, pb)[inlier_mask].mean()
        post = _symmetric_transfer_error(refit, pa, pb)[inlier_mask].mean()
        if post <= pre:
            best_h = refit
    final = Homography(best_h)
    final_mask = _symmetric_transfer_error(final.matrix, pa, pb) < thresh
    return final, final_mask
