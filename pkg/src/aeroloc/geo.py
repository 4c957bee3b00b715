"""Geo-referencing between tile pixels and world coordinates, plus trajectory metrics.

A local equirectangular earth model is used throughout: flight areas are a
few kilometres across, where the model error is far below a metre.  Success
and drift thresholds follow strict inequalities: a frame is a success when
its error is strictly below 25 m, and a drift frame when strictly above
50 m.  The success rate is computed over all frames; the mean localization
error only over non-drift frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from aeroloc.errors import ContractViolationError, ProjectionError

METERS_PER_DEGREE = 111320.0
SUCCESS_THRESHOLD_M = 25.0
DRIFT_THRESHOLD_M = 50.0


@dataclass(frozen=True)
class GeoRef:
    """Affine pixel -> (lat, lon) transform for one image.

    ``origin_lat``/``origin_lon`` georeference pixel (0, 0); ``gx``/``gy``
    are metres per pixel with x pointing east and y pointing south.
    """

    origin_lat: float
    origin_lon: float
    gx: float
    gy: float

    def __post_init__(self) -> None:
        if not (self.gx > 0 and self.gy > 0):
            raise ContractViolationError("meters-per-pixel must be positive")
        if abs(self.origin_lat) > 90 or abs(self.origin_lon) > 180:
            raise ContractViolationError("origin out of latitude/longitude range")

    def to_dict(self) -> dict:
        return {
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "gx": self.gx,
            "gy": self.gy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoRef":
        return cls(
            origin_lat=float(d["origin_lat"]),
            origin_lon=float(d["origin_lon"]),
            gx=float(d["gx"]),
            gy=float(d["gy"]),
        )

    def shifted(self, dx_px: float, dy_px: float) -> "GeoRef":
        """Geo reference of a crop whose pixel (0,0) sits at (dx_px, dy_px)."""
        origin = pixel_to_geo(self, (dx_px, dy_px))
        return GeoRef(origin.latitude, origin.longitude, self.gx, self.gy)


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ContractViolationError("geo point out of range")


def _check_latitude(ref: GeoRef) -> None:
    if abs(ref.origin_lat) >= 89.9:
        raise ProjectionError("latitudes within 0.1 deg of the poles are unsupported")


def pixel_to_geo(ref: GeoRef, p: tuple[float, float]) -> GeoPoint:
    """Map a pixel (x, y) of the referenced image to latitude/longitude."""
    _check_latitude(ref)
    x, y = p
    lat = ref.origin_lat - y * ref.gy / METERS_PER_DEGREE
    lon = ref.origin_lon + x * ref.gx / (METERS_PER_DEGREE * math.cos(math.radians(ref.origin_lat)))
    return GeoPoint(lat, lon)


def geo_to_pixel(ref: GeoRef, g: GeoPoint) -> tuple[float, float]:
    """Inverse of :func:`pixel_to_geo` under the same local model."""
    _check_latitude(ref)
    y = (ref.origin_lat - g.latitude) * METERS_PER_DEGREE / ref.gy
    x = (
        (g.longitude - ref.origin_lon)
        * METERS_PER_DEGREE
        * math.cos(math.radians(ref.origin_lat))
        / ref.gx
    )
    return (x, y)


def localization_error(est: GeoPoint, gt: GeoPoint) -> float:
    """Equirectangular distance in metres between an estimate and ground truth.

    Longitude is scaled by the cosine of the mean latitude, which keeps the
    distance exactly symmetric in its arguments.
    """
    mid = math.radians((est.latitude + gt.latitude) / 2.0)
    dlat = (est.latitude - gt.latitude) * METERS_PER_DEGREE
    dlon = (est.longitude - gt.longitude) * METERS_PER_DEGREE * math.cos(mid)
    return math.hypot(dlat, dlon)


@dataclass
class TrajectoryEval:
    """Aggregated localization metrics over one flight sequence."""

    errors_m: list[float]
    success_rate: float
    mle_m: float | None
    drift: list[bool]
    all_drift: bool = False
    n_frames: int = 0
    n_success: int = 0
    n_drift: int = 0

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "n_success": self.n_success,
            "n_drift": self.n_drift,
            "success_rate": self.success_rate,
            "mle_m": self.mle_m,
            "all_drift": self.all_drift,
        }


def evaluate_trajectory(errors_m: list[float]) -> TrajectoryEval:
    """Compute success rate, drift flags and mean localization error.

    ``errors_m`` may contain ``inf`` for frames without an estimate; such
    frames count as drift and never as success.  Raises on an empty list.
    """
    if not errors_m:
        raise ContractViolationError("cannot evaluate an empty trajectory")
    errors = [float(e) for e in errors_m]
    drift = [e > DRIFT_THRESHOLD_M for e in errors]
    n = len(errors)
    n_success = sum(1 for e in errors if e < SUCCESS_THRESHOLD_M)
    non_drift = [e for e, d in zip(errors, drift) if not d]
    all_drift = not non_drift
    mle = sum(non_drift) / len(non_drift) if non_drift else None
    return TrajectoryEval(
        errors_m=errors,
        success_rate=n_success / n,
        mle_m=mle,
        drift=drift,
        all_drift=all_drift,
        n_frames=n,
        n_success=n_success,
        n_drift=sum(drift),
    )
