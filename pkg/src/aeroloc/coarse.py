"""Coarse region matching on dense feature grids.

Composes the 4D-correlation machinery into the full coarse chain
(correlation -> soft mutual-NN -> symmetrised consensus stack -> soft
mutual-NN -> dual softmax -> hard assignment) and extracts the
centre-region correspondence that feeds the fine stage: with a
downward-facing camera, the centre block of the query grid corresponds to
the vehicle's ground position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from aeroloc.conv4d import Conv4dModel, neighborhood_consensus
from aeroloc.errors import CoarseMatchFailure, ContractViolationError
from aeroloc.features import DenseFeatureMap
from aeroloc.matching4d import (
    CellMatchSet,
    cosine_correlation,
    dual_softmax,
    hard_assign,
    soft_mutual_nn,
)


@dataclass
class CoarseMatchConfig:
    """Centre-block geometry and assignment threshold for the coarse stage."""

    center_neighborhood: int = 3
    region_margin: int = 1
    score_threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.center_neighborhood < 1 or self.center_neighborhood % 2 == 0:
            raise ContractViolationError("center_neighborhood must be odd and >= 1")
        if self.region_margin < 0:
            raise ContractViolationError("region_margin must be >= 0")


@dataclass(frozen=True)
class RegionCorrespondence:
    """Matched pixel rectangles (x0, y0, x1, y1) with a confidence in [0, 1]."""

    uav_region: tuple[int, int, int, int]
    sat_region: tuple[int, int, int, int]
    confidence: float

    def __post_init__(self) -> None:
        for name, rect in (("uav_region", self.uav_region), ("sat_region", self.sat_region)):
            x0, y0, x1, y1 = rect
            if not (x0 < x1 and y0 < y1):
                raise ContractViolationError(f"{name} is empty: {rect}")

    @staticmethod
    def rect_center(rect: tuple[int, int, int, int]) -> tuple[float, float]:
        x0, y0, x1, y1 = rect
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def coarse_match(
    fu: DenseFeatureMap,
    fs: DenseFeatureMap,
    model: Conv4dModel,
    cfg: CoarseMatchConfig | None = None,
) -> CellMatchSet:
    """Full coarse chain from two feature grids to hard cell matches."""
    cfg = cfg or CoarseMatchConfig()
    s_hat = soft_mutual_nn(cosine_correlation(fu, fs))
    m = neighborhood_consensus(s_hat, model)
    probs = dual_softmax(soft_mutual_nn(m))
    return hard_assign(probs, cfg.score_threshold)


def _cells_to_px(j0: int, i0: int, j1: int, i1: int, fmap: DenseFeatureMap):
    r = fmap.stride
    x0, y0 = j0 * r, i0 * r
    x1 = min(j1 * r, fmap.source_width)
    y1 = min(i1 * r, fmap.source_height)
    return (x0, y0, x1, y1)


def center_block(fu: DenseFeatureMap, cfg: CoarseMatchConfig) -> tuple[int, int, int, int]:
    """Cell bounds (i0, i1, j0, j1) of the centre block of a query grid."""
    ci, cj = fu.height // 2, fu.width // 2
    half = cfg.center_neighborhood // 2
    return (
        max(0, ci - half),
        min(fu.height, ci + half + 1),
        max(0, cj - half),
        min(fu.width, cj + half + 1),
    )


def select_center_matches(
    matches: CellMatchSet, fu: DenseFeatureMap, cfg: CoarseMatchConfig
) -> list:
    """Matches whose query cell lies inside the centre block."""
    i0, i1, j0, j1 = center_block(fu, cfg)
    return [m for m in matches if i0 <= m.uav[0] < i1 and j0 <= m.uav[1] < j1]


def center_region_correspondence(
    matches: CellMatchSet,
    fu: DenseFeatureMap,
    fs: DenseFeatureMap,
    cfg: CoarseMatchConfig | None = None,
) -> RegionCorrespondence:
    """Region-level correspondence for the centre block of the query grid.

    Takes the ``center_neighborhood`` x ``center_neighborhood`` cell block
    centred on the query grid's middle cell, collects the reference cells
    matched to it, and converts both to pixel rectangles via the grids'
    strides.  The reference rectangle is the bounding box of the matched
    cells expanded by ``region_margin`` cells; the confidence is the mean
    match score.  Raises :class:`CoarseMatchFailure` when no match falls in
    the centre block.
    """
    cfg = cfg or CoarseMatchConfig()
    i0, i1, j0, j1 = center_block(fu, cfg)
    selected = select_center_matches(matches, fu, cfg)
    if not selected:
        raise CoarseMatchFailure("no coarse matches inside the centre block")

    ks = [m.sat[0] for m in selected]
    ls = [m.sat[1] for m in selected]
    mk0 = max(0, min(ks) - cfg.region_margin)
    mk1 = min(fs.height, max(ks) + 1 + cfg.region_margin)
    ml0 = max(0, min(ls) - cfg.region_margin)
    ml1 = min(fs.width, max(ls) + 1 + cfg.region_margin)

    uav_px = _cells_to_px(j0, i0, j1, i1, fu)
    sat_px = _cells_to_px(ml0, mk0, ml1, mk1, fs)
    if not (sat_px[0] < sat_px[2] and sat_px[1] < sat_px[3]):
        raise CoarseMatchFailure("matched reference cells fall outside the image")
    confidence = float(np.clip(np.mean([m.score for m in selected]), 0.0, 1.0))
    return RegionCorrespondence(uav_px, sat_px, confidence)


class CoarseMatcher(BaseEstimator):
    """Estimator facade over the coarse matching chain.

    ``fit`` trains the consensus filter with weak supervision on labelled
    feature-map pairs; ``predict`` returns hard cell matches for a pair of
    grids.  Before fitting, predictions use the pass-through (identity)
    filter, which reduces the chain to pure soft mutual-NN filtering.
    """

    def __init__(
        self,
        center_neighborhood: int = 3,
        region_margin: int = 1,
        score_threshold: float = 0.0,
        learning_rate: float = 1e-3,
        epochs: int = 5,
        random_state: int = 0,
    ):
        self.center_neighborhood = center_neighborhood
        self.region_margin = region_margin
        self.score_threshold = score_threshold
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state

    def _config(self) -> CoarseMatchConfig:
        return CoarseMatchConfig(
            center_neighborhood=self.center_neighborhood,
            region_margin=self.region_margin,
            score_threshold=self.score_threshold,
        )

    def _model(self) -> Conv4dModel:
        return getattr(self, "model_", None) or Conv4dModel.identity()

    def fit(self, pairs, y=None) -> "CoarseMatcher":
        """Train the consensus filter on a list of labelled training pairs."""
        from aeroloc.training import train_epoch

        model = Conv4dModel.random(self.random_state)
        history = []
        for epoch in range(self.epochs):
            model, mean_loss = train_epoch(
                list(pairs), model, self.learning_rate, seed=self.random_state + epoch
            )
            history.append(mean_loss)
        self.model_ = model
        self.loss_history_ = history
        return self

    def predict(self, fu: DenseFeatureMap, fs: DenseFeatureMap) -> CellMatchSet:
        return coarse_match(fu, fs, self._model(), self._config())

    def match_region(
        self, fu: DenseFeatureMap, fs: DenseFeatureMap
    ) -> tuple[CellMatchSet, RegionCorrespondence]:
        matches = self.predict(fu, fs)
        return matches, center_region_correspondence(matches, fu, fs, self._config())
