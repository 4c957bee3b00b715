"""Correlation volumes, soft mutual-nearest-neighbour filtering and assignment.

The operations here work on 4D match-score tensors of shape
``(h_u, w_u, h_s, w_s)``: entry ``(i, j, k, l)`` scores the match between
cell ``(i, j)`` of the query grid and cell ``(k, l)`` of the reference grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from aeroloc.features import DenseFeatureMap, check_feature_pair, check_nonnegative, check_tensor4d

SOFT_MNN_EPS = 1e-12


def cosine_correlation(fu: DenseFeatureMap, fs: DenseFeatureMap) -> np.ndarray:
    """Clamped cosine similarity between every pair of cells.

    Values are clamped to [0, 1]; cells with zero-norm feature vectors get
    zero similarity everywhere they appear.
    """
    check_feature_pair(fu, fs)
    a, b = fu.data, fs.data
    dot = np.tensordot(a, b, axes=([2], [2]))
    nu = np.linalg.norm(a, axis=2)
    ns = np.linalg.norm(b, axis=2)
    denom = nu[:, :, None, None] * ns[None, None, :, :]
    sim = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    return np.clip(sim, 0.0, 1.0)


def soft_mutual_nn(t: np.ndarray) -> np.ndarray:
    """Rescale each score by its ratio to the two slice maxima.

    For a non-negative tensor this is contractive: every output entry is at
    most its input, with equality exactly where the entry is the maximum of
    both slices through it (for positive entries with unique maxima).
    All-zero slices map to zero via the denominator guard.
    """
    t = check_nonnegative(t, "similarity tensor")
    u = t.max(axis=(0, 1), keepdims=True)
    v = t.max(axis=(2, 3), keepdims=True)
    return t * (t / np.maximum(u, SOFT_MNN_EPS)) * (t / np.maximum(v, SOFT_MNN_EPS))


def soft_mutual_nn_backward(m: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`soft_mutual_nn` treating the slice argmaxes as fixed.

    ``m`` is the forward input, ``d_hat`` the upstream gradient; ties in a
    slice resolve to the lowest row-major index, matching the forward max.
    """
    hu, wu, hs, ws = m.shape
    u = m.max(axis=(0, 1))
    v = m.max(axis=(2, 3))
    uu = np.maximum(u, SOFT_MNN_EPS)[None, None, :, :]
    vv = np.maximum(v, SOFT_MNN_EPS)[:, :, None, None]
    m_hat = m**3 / (uu * vv)

    d_m = d_hat * 3.0 * m * m / (uu * vv)

    du = -(d_hat * m_hat).sum(axis=(0, 1)) / np.maximum(u, SOFT_MNN_EPS)
    du = np.where(u > SOFT_MNN_EPS, du, 0.0)
    arg_u = m.reshape(hu * wu, hs, ws).argmax(axis=0)
    iu, ju = np.unravel_index(arg_u, (hu, wu))
    kk, ll = np.meshgrid(np.arange(hs), np.arange(ws), indexing="ij")
    np.add.at(d_m, (iu, ju, kk, ll), du)

    dv = -(d_hat * m_hat).sum(axis=(2, 3)) / np.maximum(v, SOFT_MNN_EPS)
    dv = np.where(v > SOFT_MNN_EPS, dv, 0.0)
    arg_v = m.reshape(hu, wu, hs * ws).argmax(axis=2)
    kv, lv = np.unravel_index(arg_v, (hs, ws))
    ii, jj = np.meshgrid(np.arange(hu), np.arange(wu), indexing="ij")
    np.add.at(d_m, (ii, jj, kv, lv), dv)
    return d_m


@dataclass(frozen=True)
class AssignmentProbabilities:
    """Match probabilities in both directions.

    ``prob_u[..., k, l]`` sums to one over the query cells for each
    reference cell; ``prob_s[i, j, ...]`` sums to one over the reference
    cells for each query cell.
    """

    prob_u: np.ndarray
    prob_s: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.prob_u.shape


def dual_softmax(m: np.ndarray) -> AssignmentProbabilities:
    """Softmax over each direction of the match tensor.

    The caller passes the soft-MNN-refined tensor.  The per-slice maximum is
    subtracted before exponentiation for overflow safety.
    """
    m = check_tensor4d(m, "match tensor")
    eu = np.exp(m - m.max(axis=(0, 1), keepdims=True))
    prob_u = eu / eu.sum(axis=(0, 1), keepdims=True)
    es = np.exp(m - m.max(axis=(2, 3), keepdims=True))
    prob_s = es / es.sum(axis=(2, 3), keepdims=True)
    return AssignmentProbabilities(prob_u, prob_s)


def dual_softmax_backward(
    p: AssignmentProbabilities, d_prob_u: np.ndarray, d_prob_s: np.ndarray
) -> np.ndarray:
    """Gradient of :func:`dual_softmax` w.r.t. its input tensor."""
    pu, ps = p.prob_u, p.prob_s
    inner_u = (d_prob_u * pu).sum(axis=(0, 1), keepdims=True)
    inner_s = (d_prob_s * ps).sum(axis=(2, 3), keepdims=True)
    return pu * (d_prob_u - inner_u) + ps * (d_prob_s - inner_s)


@dataclass(frozen=True)
class CellMatch:
    uav: tuple[int, int]
    sat: tuple[int, int]
    score: float


@dataclass
class CellMatchSet:
    """Injective partial matching between two cell grids."""

    matches: list[CellMatch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)

    def __bool__(self) -> bool:
        return bool(self.matches)


def hard_assign(p: AssignmentProbabilities, threshold: float = 0.0) -> CellMatchSet:
    """Keep mutually-argmax cell pairs whose joint probability clears ``threshold``.

    A pair ``((i,j), (k,l))`` survives when ``(i,j)`` is the argmax of
    ``prob_u`` for reference cell ``(k,l)`` and ``(k,l)`` is the argmax of
    ``prob_s`` for query cell ``(i,j)``; its score is the product of the two
    probabilities.  Argmax ties resolve to the lowest row-major index.
    """
    pu, ps = p.prob_u, p.prob_s
    hu, wu, hs, ws = pu.shape
    arg_u = pu.reshape(hu * wu, hs * ws).argmax(axis=0)
    arg_s = ps.reshape(hu * wu, hs * ws).argmax(axis=1)
    matches = []
    for ij in range(hu * wu):
        kl = int(arg_s[ij])
        if int(arg_u[kl]) != ij:
            continue
        i, j = divmod(ij, wu)
        k, l = divmod(kl, ws)
        score = float(pu[i, j, k, l] * ps[i, j, k, l])
        if score >= threshold:
            matches.append(CellMatch((i, j), (k, l), score))
    return CellMatchSet(matches)


def weak_supervision_loss(
    p: AssignmentProbabilities, label: int, matches: CellMatchSet | None = None
) -> float:
    """Weakly supervised matching loss over hard-assigned cells.

    ``-label * (mean(prob_u at matches) + mean(prob_s at matches))`` with
    ``label`` +1 for corresponding pairs and -1 for non-corresponding ones.
    An empty assignment set yields 0 with a warning.
    """
    if label not in (1, -1):
        raise ValueError("label must be +1 or -1")
    if matches is None:
        matches = hard_assign(p, 0.0)
    if not matches:
        warnings.warn("empty hard-assignment set; loss defined as 0", stacklevel=2)
        return 0.0
    pu, ps = p.prob_u, p.prob_s
    mean_u = float(np.mean([pu[m.uav + m.sat] for m in matches]))
    mean_s = float(np.mean([ps[m.uav + m.sat] for m in matches]))
    return -label * (mean_u + mean_s)
