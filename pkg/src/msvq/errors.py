"""Exception hierarchy.  The CLI maps these onto exit codes."""


class MSVQError(Exception):
    """Base class for all package errors."""


class ValidationError(MSVQError, ValueError):
    """Bad configuration, arguments or data."""


class DimensionError(ValidationError):
    """Array shapes that violate a stride or matching-shape precondition."""


class BitstreamError(ValidationError):
    """Malformed, truncated or corrupted ``.msvq`` container."""


class CheckpointError(ValidationError):
    """Malformed or incompatible ``.ntc`` checkpoint."""


class NonFiniteError(MSVQError, FloatingPointError):
    """A loss or gradient became NaN/Inf."""
