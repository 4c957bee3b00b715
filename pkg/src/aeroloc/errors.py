"""Exception taxonomy shared across the library.

The CLI maps :class:`ConfigurationError` to exit code 2 and
:class:`DataFormatError` to exit code 3; everything else is an ordinary
failure.
"""


class AerolocError(Exception):
    """Base class for all library-specific errors."""


class DimensionMismatchError(AerolocError, ValueError):
    """Operands have incompatible shapes or channel counts."""


class ContractViolationError(AerolocError, ValueError):
    """An input violates a documented precondition (e.g. negative scores)."""


class DataFormatError(AerolocError, ValueError):
    """A file or manifest does not conform to its documented format."""


class ConfigurationError(AerolocError, ValueError):
    """Invalid run configuration (bad flag combination, empty database, ...)."""


class BackendUnavailableError(AerolocError, RuntimeError):
    """A feature-extraction backend cannot run (missing weights or assets)."""


class CoarseMatchFailure(AerolocError, RuntimeError):
    """Coarse matching produced no usable correspondence for the query region."""


class HomographyEstimationError(AerolocError, RuntimeError):
    """Robust homography fitting failed (too few or degenerate matches)."""


class ProjectionError(AerolocError, RuntimeError):
    """A projective mapping sent a point to infinity."""


class TrainingDivergedError(AerolocError, RuntimeError):
    """Training produced a non-finite loss; carries diagnostics in the message."""
