"""End-to-end localization: retrieval, coarse region matching, fine alignment.

Each frame is processed independently (no motion model, no temporal
filtering): retrieve the top-k reference tiles, walk them in rank order
until the coarse stage yields a usable centre-region correspondence, refine
it with keypoint matching and a robust homography, and project the frame
centre into the tile to read off a geo position.

Failures degrade gracefully so every frame yields an estimate: if the fine
stage fails the reference-region centre is used (status ``fine_fail``); if
no candidate survives coarse matching, the top-1 tile centre is used
(status ``retrieval_only``).  Frames whose inputs cannot be read at all are
``coarse_fail`` with no estimate and count as drift in the metrics.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aeroloc import geo as geomod
from aeroloc.backends import HandcraftedDenseExtractor, make_fine_backend
from aeroloc.coarse import (
    CoarseMatchConfig,
    RegionCorrespondence,
    center_region_correspondence,
    coarse_match,
    select_center_matches,
)
from aeroloc.conv4d import Conv4dModel
from aeroloc.errors import (
    AerolocError,
    CoarseMatchFailure,
    ConfigurationError,
    DataFormatError,
)
from aeroloc.features import DenseFeatureMap
from aeroloc.fine import FineConfig, decode_keypoints, mutual_nn_match, sample_descriptors
from aeroloc.homography import Homography, estimate_homography_ransac, project_center
from aeroloc.imageio import central_square_crop, load_gray, resize_bilinear
from aeroloc.retrieval import TileDatabase, TileRetriever, aggregate_descriptor
from aeroloc.store import read_tensor

STATUS_OK = "ok"
STATUS_COARSE_FAIL = "coarse_fail"
STATUS_FINE_FAIL = "fine_fail"
STATUS_RETRIEVAL_ONLY = "retrieval_only"


@dataclass
class PipelineConfig:
    """Knobs for the full localization chain; everything is flag-settable."""

    retrieval_k: int = 3
    coarse: CoarseMatchConfig = field(default_factory=CoarseMatchConfig)
    fine: FineConfig = field(default_factory=FineConfig)
    dense_stride: int = 32
    fine_backend: str = "fallback"
    fine_weights: str | None = None
    seed: int = 0
    retrieval_only: bool = False
    min_center_matches: int = 3
    max_region_span_cells: int = 9
    min_fine_inliers: int = 8

    def __post_init__(self) -> None:
        if self.retrieval_k < 1:
            raise ConfigurationError("retrieval k must be >= 1")


@dataclass
class FrameResult:
    """Outcome of localizing one frame."""

    frame_id: str
    status: str
    tile_id: int | None = None
    region: RegionCorrespondence | None = None
    homography: Homography | None = None
    position: geomod.GeoPoint | None = None
    n_fine_inliers: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "status": self.status,
            "tile_id": self.tile_id,
            "region": None
            if self.region is None
            else {
                "uav": list(self.region.uav_region),
                "sat": list(self.region.sat_region),
                "confidence": self.region.confidence,
            },
            "homography": None if self.homography is None else self.homography.matrix.tolist(),
            "est_lat": None if self.position is None else self.position.latitude,
            "est_lon": None if self.position is None else self.position.longitude,
            "n_fine_inliers": self.n_fine_inliers,
            "note": self.note,
        }


def frame_seed(base_seed: int, frame_id: str) -> int:
    """Stable per-frame seed: independent of frame order and other frames."""
    return (base_seed * 2654435761 + zlib.crc32(frame_id.encode())) % (2**31)


class Localizer:
    """Holds the database, models and caches; localizes frames one by one."""

    def __init__(
        self,
        db: TileDatabase,
        config: PipelineConfig | None = None,
        consensus_model: Conv4dModel | None = None,
    ):
        if not db.records:
            raise ConfigurationError("tile database is empty")
        self.db = db
        self.config = config or PipelineConfig()
        self.model = consensus_model or Conv4dModel.identity()
        self.retriever = TileRetriever(k=self.config.retrieval_k).fit(db.records)
        self.extractor = HandcraftedDenseExtractor(stride=self.config.dense_stride)
        self.fine_backend = make_fine_backend(
            self.config.fine_backend, self.config.fine_weights
        )
        self._map_img: np.ndarray | None = None
        self._tile_feature_cache: dict[int, DenseFeatureMap] = {}

    # -- input plumbing ----------------------------------------------------

    def _map_image(self) -> np.ndarray:
        if self._map_img is None:
            self._map_img = load_gray(self.db.map_path)
        return self._map_img

    def _tile_image(self, tile_id: int) -> np.ndarray:
        x0, y0, x1, y1 = self.retriever.record(tile_id).rect
        return self._map_image()[y0:y1, x0:x1]

    def _tile_features(self, tile_id: int) -> DenseFeatureMap:
        if tile_id not in self._tile_feature_cache:
            record = self.retriever.record(tile_id)
            if record.features_path:
                self._tile_feature_cache[tile_id] = read_feature_map(record.features_path)
            else:
                self._tile_feature_cache[tile_id] = self.extractor.extract(
                    self._tile_image(tile_id)
                )
        return self._tile_feature_cache[tile_id]

    def _frame_inputs(self, frame: dict) -> tuple[np.ndarray | None, DenseFeatureMap]:
        """Frame image (preprocessed) and dense features; image may be absent."""
        image = None
        if frame.get("image"):
            image = load_gray(frame["image"])
            side = self.db.tile_size
            if image.shape != (side, side):
                image = resize_bilinear(central_square_crop(image), side, side)
        if frame.get("features"):
            features = read_feature_map(frame["features"])
        elif image is not None:
            features = self.extractor.extract(image)
        else:
            raise DataFormatError(f"frame {frame.get('frame_id')}: no image or features")
        return image, features

    # -- stages -------------------------------------------------------------

    @staticmethod
    def _pad_rect(rect, pad: int, width: int, height: int) -> tuple[int, int, int, int]:
        x0, y0, x1, y1 = rect
        return (max(0, x0 - pad), max(0, y0 - pad), min(width, x1 + pad), min(height, y1 + pad))

    def _fine_stage(
        self,
        frame_img: np.ndarray,
        tile_img: np.ndarray,
        region: RegionCorrespondence,
        seed: int,
    ) -> tuple[Homography, tuple[float, float], int]:
        """Match the two regions and project the frame centre into the tile.

        Both crops get one coarse cell of context so the extractors see full
        neighbourhoods at the region borders.
        """
        pad = self.config.dense_stride
        fh, fw = frame_img.shape
        th, tw = tile_img.shape
        ux0, uy0, ux1, uy1 = self._pad_rect(region.uav_region, pad, fw, fh)
        sx0, sy0, sx1, sy1 = self._pad_rect(region.sat_region, pad, tw, th)
        crop_u = frame_img[uy0:uy1, ux0:ux1]
        crop_s = tile_img[sy0:sy1, sx0:sx1]

        cfg = self.config.fine
        feats_u = self.fine_backend.extract(crop_u)
        feats_s = self.fine_backend.extract(crop_s)
        kps_u = decode_keypoints(feats_u, cfg)
        kps_s = decode_keypoints(feats_s, cfg)
        matches = mutual_nn_match(
            kps_u,
            sample_descriptors(feats_u, kps_u),
            kps_s,
            sample_descriptors(feats_s, kps_s),
        )
        hom, inliers = estimate_homography_ransac(matches, cfg, seed=seed)
        n_inliers = int(inliers.sum())
        if n_inliers < self.config.min_fine_inliers:
            raise CoarseMatchFailure(f"only {n_inliers} fine inliers")

        frame_h, frame_w = frame_img.shape
        center_local = (frame_w / 2.0 - ux0, frame_h / 2.0 - uy0)
        px, py = project_center(hom, center_local)
        # sanity: the projected centre must land in or near the matched region
        pad = (sx1 - sx0) / 2.0 + 1.0
        if not (-pad <= px <= (sx1 - sx0) + pad and -pad <= py <= (sy1 - sy0) + pad):
            raise CoarseMatchFailure("projected centre far outside the matched region")
        return hom, (sx0 + px, sy0 + py), n_inliers

    def localize_frame(self, frame: dict, frame_index: int = 0) -> FrameResult:
        frame_id = frame.get("frame_id", f"frame_{frame_index}")
        try:
            frame_img, features = self._frame_inputs(frame)
            query = aggregate_descriptor(features)
        except AerolocError as exc:
            return FrameResult(frame_id, STATUS_COARSE_FAIL, note=str(exc))

        candidates = self.retriever.query(query, self.config.retrieval_k)
        top1 = self.retriever.record(candidates[0][0])

        if self.config.retrieval_only:
            pos = geomod.pixel_to_geo(
                top1.georef,
                ((top1.rect[2] - top1.rect[0]) / 2.0, (top1.rect[3] - top1.rect[1]) / 2.0),
            )
            return FrameResult(frame_id, STATUS_RETRIEVAL_ONLY, top1.tile_id, position=pos)

        seed = frame_seed(self.config.seed, frame_id)
        best_partial: tuple[int, RegionCorrespondence] | None = None
        for tile_id, _sim in candidates:
            fs = self._tile_features(tile_id)
            matches = coarse_match(features, fs, self.model, self.config.coarse)
            if len(select_center_matches(matches, features, self.config.coarse)) < max(
                1, self.config.min_center_matches
            ):
                continue
            try:
                region = center_region_correspondence(
                    matches, features, fs, self.config.coarse
                )
            except CoarseMatchFailure:
                continue
            span_px = max(
                region.sat_region[2] - region.sat_region[0],
                region.sat_region[3] - region.sat_region[1],
            )
            if (
                self.config.max_region_span_cells
                and span_px > self.config.max_region_span_cells * fs.stride
            ):
                continue
            if best_partial is None:
                best_partial = (tile_id, region)
            if frame_img is None:
                continue
            try:
                hom, tile_pt, n_inliers = self._fine_stage(
                    frame_img, self._tile_image(tile_id), region, seed
                )
            except AerolocError:
                continue
            record = self.retriever.record(tile_id)
            pos = geomod.pixel_to_geo(record.georef, tile_pt)
            return FrameResult(
                frame_id, STATUS_OK, tile_id, region, hom, pos, n_fine_inliers=n_inliers
            )

        if best_partial is not None:
            tile_id, region = best_partial
            record = self.retriever.record(tile_id)
            pos = geomod.pixel_to_geo(
                record.georef, RegionCorrespondence.rect_center(region.sat_region)
            )
            return FrameResult(frame_id, STATUS_FINE_FAIL, tile_id, region, position=pos)

        pos = geomod.pixel_to_geo(
            top1.georef,
            ((top1.rect[2] - top1.rect[0]) / 2.0, (top1.rect[3] - top1.rect[1]) / 2.0),
        )
        return FrameResult(frame_id, STATUS_RETRIEVAL_ONLY, top1.tile_id, position=pos)

    def run_sequence(self, manifest: dict) -> tuple[list[FrameResult], geomod.TrajectoryEval]:
        """Localize every frame independently and aggregate trajectory metrics."""
        results = []
        errors = []
        for idx, frame in enumerate(manifest["frames"]):
            try:
                result = self.localize_frame(frame, idx)
            except AerolocError as exc:
                result = FrameResult(
                    frame.get("frame_id", f"frame_{idx}"), STATUS_COARSE_FAIL, note=str(exc)
                )
            results.append(result)
            gt = geomod.GeoPoint(frame["gt_lat"], frame["gt_lon"])
            if result.position is None:
                errors.append(float("inf"))
            else:
                errors.append(geomod.localization_error(result.position, gt))
        return results, geomod.evaluate_trajectory(errors)


def read_feature_map(path: str | Path) -> DenseFeatureMap:
    """Load a dense feature map from a tensor file with stride metadata."""
    data, meta = read_tensor(path)
    if data.ndim != 3:
        raise DataFormatError(f"{path}: dense features must be rank 3, got {data.ndim}")
    try:
        stride = int(meta["stride"])
        src_w = int(meta["source_width"])
        src_h = int(meta["source_height"])
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing metadata field {exc}") from exc
    return DenseFeatureMap(data.astype(np.float64), stride, src_w, src_h)


def write_results_csv(path: str | Path, results: list[FrameResult], manifest: dict) -> None:
    """Per-frame CSV: frame_id, est_lat, est_lon, gt_lat, gt_lon, error_m, drift."""
    by_id = {f["frame_id"]: f for f in manifest["frames"]}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["frame_id", "est_lat", "est_lon", "gt_lat", "gt_lon", "error_m", "drift"]
        )
        for result in results:
            frame = by_id[result.frame_id]
            gt = geomod.GeoPoint(frame["gt_lat"], frame["gt_lon"])
            if result.position is None:
                err = float("inf")
                est_lat = est_lon = ""
            else:
                err = geomod.localization_error(result.position, gt)
                est_lat = repr(result.position.latitude)
                est_lon = repr(result.position.longitude)
            writer.writerow(
                [
                    result.frame_id,
                    est_lat,
                    est_lon,
                    repr(gt.latitude),
                    repr(gt.longitude),
                    repr(err) if err != float("inf") else "inf",
                    int(err > geomod.DRIFT_THRESHOLD_M),
                ]
            )


def write_results_json(
    path: str | Path,
    results: list[FrameResult],
    evaluation: geomod.TrajectoryEval,
) -> None:
    doc = {
        "metrics": evaluation.to_dict(),
        "frames": [r.to_dict() for r in results],
        "statuses": {
            status: sum(1 for r in results if r.status == status)
            for status in (STATUS_OK, STATUS_FINE_FAIL, STATUS_RETRIEVAL_ONLY, STATUS_COARSE_FAIL)
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
