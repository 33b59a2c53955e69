"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation/config problems -> 2,
data problems -> 3, capacity problems -> 4.
"""


class RotationError(Exception):
    """Base class for all package errors."""


class ValidationError(RotationError, ValueError):
    """Inputs violate a documented precondition or invariant."""


class ConfigError(ValidationError):
    """Structured config is malformed; message names the offending key path."""


class DataError(RotationError):
    """Input data is missing, unreadable or numerically invalid."""


class DataFormatError(DataError):
    """Input file does not follow the expected layout (ragged rows, bad header)."""


class UndefinedMomentError(RotationError, ValueError):
    """A moment (variance, correlation) is undefined for the given inputs."""


class EstimatorError(RotationError, ValueError):
    """An estimator is undefined on the realized sample."""


class DegenerateOverlapError(EstimatorError):
    """Change estimate requested across samples with an empty overlap."""


class CapacityError(RotationError):
    """Instance is too large for exhaustive enumeration; use Monte Carlo."""
