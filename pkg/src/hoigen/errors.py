"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, MissingDependencyError -> 3,
DataFormatError -> 4, everything else -> 1.
"""


class HoiGenError(Exception):
    """Base class for all package errors."""


class ConfigError(HoiGenError, ValueError):
    """Invalid or contradictory configuration (bad flag combos, bad values)."""


class ContractError(HoiGenError, ValueError):
    """An operation was called with arguments violating its preconditions
    (mismatched shapes, unknown roles, out-of-range parameters)."""


class MissingDependencyError(HoiGenError):
    """A pipeline stage or synthesis call needs an artifact (checkpoint,
    canonical set) that has not been produced yet."""


class RetrievalError(HoiGenError, KeyError):
    """Lookup of an action label absent from a canonical motion set."""


class NumericalError(HoiGenError, ArithmeticError):
    """Degenerate numerical input (non-finite statistics, singular covariance)."""


class DataFormatError(HoiGenError):
    """Base class for container/manifest parsing failures."""


class SchemaVersionError(DataFormatError):
    """Container schema version is unknown or incompatible."""


class PayloadError(DataFormatError):
    """Binary payload is truncated, oversized, or otherwise inconsistent
    with its manifest."""


class ArrayShapeError(DataFormatError):
    """A named array in a container does not match its declared dtype/shape."""
