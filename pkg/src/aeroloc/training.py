"""Weakly supervised training of the structural-consensus filter.

Positive pairs couple a query frame with the reference patch at its true
location; negatives pair it with patches far away.  The loss pushes the
probabilities of hard-assigned matches up for positives and down for
negatives, with the assignment indices treated as fixed during
backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aeroloc import geo as geomod
from aeroloc.conv4d import Conv4dModel, consensus_backward, consensus_forward
from aeroloc.errors import ContractViolationError, DataFormatError, TrainingDivergedError
from aeroloc.features import DenseFeatureMap
from aeroloc.matching4d import (
    AssignmentProbabilities,
    CellMatchSet,
    cosine_correlation,
    dual_softmax,
    dual_softmax_backward,
    hard_assign,
    soft_mutual_nn,
    soft_mutual_nn_backward,
)


@dataclass(frozen=True)
class TrainingPair:
    uav_features: DenseFeatureMap
    sat_features: DenseFeatureMap
    label: int

    def __post_init__(self) -> None:
        if self.label not in (1, -1):
            raise ContractViolationError("training label must be +1 or -1")


@dataclass
class GradientResult:
    """Loss value and per-layer (d_weights, d_bias) for one training pair."""

    loss: float
    grads: list[tuple[np.ndarray, np.ndarray]]
    matches: CellMatchSet
    empty_assignment: bool = False


def pair_probabilities(
    pair: TrainingPair, model: Conv4dModel
) -> tuple[AssignmentProbabilities, CellMatchSet]:
    """Forward pass of the full coarse-matching chain for one pair."""
    s_hat = soft_mutual_nn(cosine_correlation(pair.uav_features, pair.sat_features))
    m, _ = consensus_forward(s_hat, model)
    p = dual_softmax(soft_mutual_nn(m))
    return p, hard_assign(p, 0.0)


def loss_gradients(pair: TrainingPair, model: Conv4dModel) -> GradientResult:
    """Analytic gradients of the pair loss w.r.t. every kernel weight and bias.

    The hard-assigned match indices (and the slice argmaxes inside the soft
    mutual-NN filter) are held fixed, so the returned gradients are exact
    derivatives of the loss evaluated at that fixed assignment.
    """
    s_hat = soft_mutual_nn(cosine_correlation(pair.uav_features, pair.sat_features))
    m, state = consensus_forward(s_hat, model)
    m_hat = soft_mutual_nn(m)
    p = dual_softmax(m_hat)
    matches = hard_assign(p, 0.0)

    zero_grads = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]
    if not matches:
        return GradientResult(0.0, zero_grads, matches, empty_assignment=True)

    pu, ps = p.prob_u, p.prob_s
    n = len(matches)
    mean_u = float(np.mean([pu[mt.uav + mt.sat] for mt in matches]))
    mean_s = float(np.mean([ps[mt.uav + mt.sat] for mt in matches]))
    loss = -pair.label * (mean_u + mean_s)

    d_pu = np.zeros_like(pu)
    d_ps = np.zeros_like(ps)
    coeff = -pair.label / n
    for mt in matches:
        d_pu[mt.uav + mt.sat] += coeff
        d_ps[mt.uav + mt.sat] += coeff

    d_mhat = dual_softmax_backward(p, d_pu, d_ps)
    d_m = soft_mutual_nn_backward(m, d_mhat)
    grads = consensus_backward(state, model, d_m)
    return GradientResult(loss, grads, matches)


def train_epoch(
    pairs: list[TrainingPair],
    model: Conv4dModel,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> tuple[Conv4dModel, float]:
    """One epoch of per-pair gradient descent; returns (model, mean loss).

    Pair order is shuffled by ``seed``.  With ``learning_rate == 0`` the
    returned model is the input object, untouched.  A non-finite loss aborts
    with diagnostics.
    """
    if not pairs:
        raise ContractViolationError("cannot train on an empty pair list")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    losses = []
    for idx in order:
        result = loss_gradients(pairs[int(idx)], model)
        if not np.isfinite(result.loss):
            raise TrainingDivergedError(
                f"non-finite loss {result.loss} on pair {int(idx)} "
                f"(label {pairs[int(idx)].label}, {len(result.matches)} matches)"
            )
        losses.append(result.loss)
        if learning_rate != 0.0 and not result.empty_assignment:
            model = model.step(result.grads, learning_rate)
    return model, float(np.mean(losses))


def build_training_pairs(
    manifest: dict,
    negatives_per_positive: int = 1,
    seed: int = 0,
    patch_size: int = 256,
    extractor=None,
) -> list[TrainingPair]:
    """Build labelled pairs from a dataset manifest.

    One positive pair per frame couples the frame's features with the
    reference-map patch centred on its ground-truth position; each negative
    uses a patch whose centre lies more than two tile-widths away, sampled
    with a seeded generator.
    """
    from aeroloc.backends import HandcraftedDenseExtractor
    from aeroloc.imageio import load_gray

    map_entry = manifest.get("map") or {}
    georef_doc = map_entry.get("georef")
    if not georef_doc:
        raise DataFormatError("manifest map entry lacks a geo reference")
    georef = geomod.GeoRef.from_dict(georef_doc)
    map_path = map_entry.get("path")
    if not map_path:
        raise DataFormatError("manifest map entry lacks an image path")
    map_img = load_gray(map_path)
    map_h, map_w = map_img.shape
    tile_size = int(map_entry.get("tile_size", 512))
    min_dist = 2.0 * tile_size

    if extractor is None:
        extractor = HandcraftedDenseExtractor()
    rng = np.random.default_rng(seed)
    half = patch_size // 2

    def crop_at(cx: float, cy: float) -> np.ndarray:
        x0 = int(round(np.clip(cx - half, 0, map_w - patch_size)))
        y0 = int(round(np.clip(cy - half, 0, map_h - patch_size)))
        return map_img[y0 : y0 + patch_size, x0 : x0 + patch_size]

    pairs: list[TrainingPair] = []
    for frame in manifest["frames"]:
        if "gt_lat" not in frame or "gt_lon" not in frame:
            raise DataFormatError(f"frame {frame.get('frame_id')} lacks geo fields")
        frame_img = load_gray(frame["image"])
        uav_features = extractor.extract(frame_img)
        gx, gy = geomod.geo_to_pixel(georef, geomod.GeoPoint(frame["gt_lat"], frame["gt_lon"]))
        pairs.append(TrainingPair(uav_features, extractor.extract(crop_at(gx, gy)), 1))
        for _ in range(negatives_per_positive):
            for _attempt in range(1000):
                nx = rng.uniform(half, map_w - half)
                ny = rng.uniform(half, map_h - half)
                if np.hypot(nx - gx, ny - gy) > min_dist:
                    break
            else:
                raise ContractViolationError(
                    "reference map too small to sample negatives two tile-widths away"
                )
            pairs.append(TrainingPair(uav_features, extractor.extract(crop_at(nx, ny)), -1))
    return pairs
