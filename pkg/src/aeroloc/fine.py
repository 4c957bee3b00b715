"""Fine-grained keypoint decoding, descriptor sampling and mutual-NN matching.

Feature extractors (see :mod:`aeroloc.backends`) produce per-cell maps on an
8-pixel grid: a 64-channel descriptor map, a reliability map and 65 keypoint
logits per cell (64 row-major pixel-offset bins plus one "no keypoint" bin).
Map node ``(i, j)`` is anchored at source pixel ``(x, y) = (8j, 8i)``;
interpolated lookups divide pixel coordinates by 8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from aeroloc.errors import ContractViolationError, DimensionMismatchError

CELL = 8
ABSENCE_BIN = 64


@dataclass(frozen=True)
class FineFeatures:
    """Per-cell descriptor/reliability/keypoint maps for one image region.

    ``width``/``height`` are the source-region pixel dims; the maps may
    cover a padded extent when the region was not a multiple of the backbone
    stride.
    """

    descriptor_map: np.ndarray
    reliability_map: np.ndarray
    keypoint_logits: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        d, r, k = self.descriptor_map, self.reliability_map, self.keypoint_logits
        if d.ndim != 3 or d.shape[2] != 64:
            raise DimensionMismatchError(f"descriptor map must be (h, w, 64), got {d.shape}")
        if r.shape != d.shape[:2]:
            raise DimensionMismatchError("reliability map dims differ from descriptor map")
        if k.shape != d.shape[:2] + (65,):
            raise DimensionMismatchError(f"keypoint logits must be (h, w, 65), got {k.shape}")
        for name, arr in (("descriptors", d), ("reliability", r), ("logits", k)):
            if not np.all(np.isfinite(arr)):
                raise ContractViolationError(f"{name} contain non-finite values")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass
class FineConfig:
    """Thresholds for keypoint extraction and robust homography fitting."""

    sigma: float = 0.05
    ransac_threshold: float = 3.0
    ransac_max_iters: int = 2000
    ransac_confidence: float = 0.995
    max_keypoints: int = 1024

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ContractViolationError("sigma must be >= 0")
        if self.ransac_threshold <= 0 or self.ransac_max_iters <= 0:
            raise ContractViolationError("RANSAC thresholds must be positive")
        if not (0 < self.ransac_confidence < 1):
            raise ContractViolationError("RANSAC confidence must be in (0, 1)")


def _interp_map(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a (h, w[, c]) map at fractional node coordinates."""
    h, w = grid.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if grid.ndim == 3:
        wy = wy[:, None]
        wx = wx[:, None]
    return (
        grid[y0, x0] * (1 - wy) * (1 - wx)
        + grid[y0, x1] * (1 - wy) * wx
        + grid[y1, x0] * wy * (1 - wx)
        + grid[y1, x1] * wy * wx
    )


def decode_keypoints(f: FineFeatures, cfg: FineConfig) -> list[Keypoint]:
    """Decode at most one keypoint per cell from the 65-bin logits.

    Per cell the logits are soft-maxed; cells whose argmax is the absence
    bin emit nothing, otherwise the winning bin places the keypoint at its
    row-major pixel offset inside the cell.  The score is the bin
    probability times the bilinearly interpolated reliability; only scores
    strictly above ``cfg.sigma`` survive, capped at ``cfg.max_keypoints``
    by descending score.
    """
    logits = f.keypoint_logits
    hc, wc = logits.shape[:2]
    shifted = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=2, keepdims=True)
    best = probs.argmax(axis=2)

    ii, jj = np.nonzero(best != ABSENCE_BIN)
    if ii.size == 0:
        return []
    bins = best[ii, jj]
    xs = jj * CELL + bins % CELL
    ys = ii * CELL + bins // CELL
    inside = (xs < f.width) & (ys < f.height)
    ii, jj, bins, xs, ys = ii[inside], jj[inside], bins[inside], xs[inside], ys[inside]
    if ii.size == 0:
        return []

    rel = _interp_map(f.reliability_map, ys / CELL, xs / CELL)
    scores = probs[ii, jj, bins] * rel
    keep = scores > cfg.sigma
    xs, ys, scores = xs[keep], ys[keep], scores[keep]
    order = np.lexsort((xs, ys, -scores))[: cfg.max_keypoints]
    return [Keypoint(float(xs[o]), float(ys[o]), float(scores[o])) for o in order]


def sample_descriptors(f: FineFeatures, keypoints: list[Keypoint]) -> np.ndarray:
    """Bilinearly interpolated, L2-normalised descriptors at keypoint positions.

    Zero interpolated vectors stay zero.  Keypoints outside the source
    region are a contract violation.
    """
    if not keypoints:
        return np.zeros((0, 64))
    xs = np.array([kp.x for kp in keypoints])
    ys = np.array([kp.y for kp in keypoints])
    if np.any(xs < 0) or np.any(ys < 0) or np.any(xs >= f.width) or np.any(ys >= f.height):
        raise ContractViolationError("keypoint outside the image")
    desc = _interp_map(f.descriptor_map, ys / CELL, xs / CELL)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    return np.divide(desc, norms, out=np.zeros_like(desc), where=norms > 0)


@dataclass
class PointMatchSet:
    """Mutual one-to-one point correspondences with descriptor distances."""

    pts_a: np.ndarray
    pts_b: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.distances)

    def __bool__(self) -> bool:
        return len(self.distances) > 0


def mutual_nn_indices(desc_a: np.ndarray, desc_b: np.ndarray) -> list[tuple[int, int, float]]:
    """Index pairs (ia, ib, distance) that are mutual Euclidean nearest neighbours.

    Ties resolve to the lowest index on either side.
    """
    if desc_a.size and desc_b.size and desc_a.shape[1] != desc_b.shape[1]:
        raise DimensionMismatchError("descriptor dimensions differ")
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d2 = (
        np.sum(desc_a**2, axis=1)[:, None]
        + np.sum(desc_b**2, axis=1)[None, :]
        - 2.0 * desc_a @ desc_b.T
    )
    np.maximum(d2, 0.0, out=d2)
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    out = []
    for ia, ib in enumerate(nn_ab):
        if nn_ba[ib] == ia:
            out.append((ia, int(ib), float(np.sqrt(d2[ia, ib]))))
    return out


def mutual_nn_match(
    kps_a: list[Keypoint], desc_a: np.ndarray, kps_b: list[Keypoint], desc_b: np.ndarray
) -> PointMatchSet:
    """Mutual nearest-neighbour matching between two keypoint sets."""
    pairs = mutual_nn_indices(desc_a, desc_b)
    if not pairs:
        return PointMatchSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    pts_a = np.array([(kps_a[ia].x, kps_a[ia].y) for ia, _, _ in pairs])
    pts_b = np.array([(kps_b[ib].x, kps_b[ib].y) for _, ib, _ in pairs])
    dists = np.array([d for _, _, d in pairs])
    return PointMatchSet(pts_a, pts_b, dists)


class FineMatcher(BaseEstimator):
    """Estimator wrapper around the fine matching stage.

    Stateless: ``fit`` only validates parameters.  ``match`` runs keypoint
    extraction, descriptor matching and robust homography fitting between
    two image regions and returns a :class:`FineMatchResult`.
    """

    def __init__(
        self,
        sigma: float = 0.05,
        ransac_threshold: float = 3.0,
        ransac_max_iters: int = 2000,
        ransac_confidence: float = 0.995,
        max_keypoints: int = 1024,
        backend: str = "fallback",
        weights_dir: str | None = None,
        random_state: int = 0,
    ):
        self.sigma = sigma
        self.ransac_threshold = ransac_threshold
        self.ransac_max_iters = ransac_max_iters
        self.ransac_confidence = ransac_confidence
        self.max_keypoints = max_keypoints
        self.backend = backend
        self.weights_dir = weights_dir
        self.random_state = random_state

    def _config(self) -> FineConfig:
        return FineConfig(
            sigma=self.sigma,
            ransac_threshold=self.ransac_threshold,
            ransac_max_iters=self.ransac_max_iters,
            ransac_confidence=self.ransac_confidence,
            max_keypoints=self.max_keypoints,
        )

    def _backend(self):
        from aeroloc.backends import make_fine_backend

        return make_fine_backend(self.backend, self.weights_dir)

    def fit(self, X=None, y=None) -> "FineMatcher":
        self._config()
        return self

    def match(self, region_a: np.ndarray, region_b: np.ndarray, seed: int | None = None):
        """Match two grayscale regions; returns a :class:`FineMatchResult`."""
        from aeroloc.homography import estimate_homography_ransac

        cfg = self._config()
        backend = self._backend()
        feats_a = backend.extract(region_a)
        feats_b = backend.extract(region_b)
        kps_a = decode_keypoints(feats_a, cfg)
        kps_b = decode_keypoints(feats_b, cfg)
        matches = mutual_nn_match(
            kps_a, sample_descriptors(feats_a, kps_a), kps_b, sample_descriptors(feats_b, kps_b)
        )
        hom, inliers = estimate_homography_ransac(
            matches, cfg, seed=self.random_state if seed is None else seed
        )
        return FineMatchResult(hom, inliers, matches, kps_a, kps_b)


@dataclass
class FineMatchResult:
    homography: "Homography"  # noqa: F821 - imported lazily to avoid a cycle
    inliers: np.ndarray
    matches: PointMatchSet
    keypoints_a: list[Keypoint]
    keypoints_b: list[Keypoint]

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())
