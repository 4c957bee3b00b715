"""Hierarchical cross-source image matching for UAV absolute visual localization.

The package is organised around three matching stages plus shared plumbing:

* satellite-tile retrieval (:mod:`aeroloc.retrieval`)
* structure-constrained coarse matching on dense feature grids
  (:mod:`aeroloc.matching4d`, :mod:`aeroloc.conv4d`, :mod:`aeroloc.coarse`,
  :mod:`aeroloc.training`)
* fine-grained keypoint matching with robust homography fitting
  (:mod:`aeroloc.fine`, :mod:`aeroloc.homography`)
* geo-referencing and trajectory metrics (:mod:`aeroloc.geo`)
* binary tensor files and dataset manifests (:mod:`aeroloc.store`)
* the end-to-end pipeline and CLI (:mod:`aeroloc.pipeline`, :mod:`aeroloc.cli`)
"""

from aeroloc.errors import (
    AerolocError,
    BackendUnavailableError,
    CoarseMatchFailure,
    ConfigurationError,
    ContractViolationError,
    DataFormatError,
    DimensionMismatchError,
    HomographyEstimationError,
    ProjectionError,
    TrainingDivergedError,
)
from aeroloc.features import DenseFeatureMap

__version__ = "0.1.0"

__all__ = [
    "AerolocError",
    "BackendUnavailableError",
    "CoarseMatchFailure",
    "ConfigurationError",
    "ContractViolationError",
    "DataFormatError",
    "DenseFeatureMap",
    "DimensionMismatchError",
    "HomographyEstimationError",
    "ProjectionError",
    "TrainingDivergedError",
    "__version__",
]
