"""Exception hierarchy shared across the package."""


class PlkrfError(Exception):
    """Base class for all package errors."""


class DimensionError(PlkrfError, ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(PlkrfError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(PlkrfError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class GeometryError(PlkrfError, ValueError):
    """Image/patch geometry is inconsistent (e.g. extents not divisible)."""


class DegenerateRayError(GeometryError):
    """A ray direction is too short to normalize."""


class IntrinsicsError(GeometryError):
    """Camera intrinsics are singular or malformed."""


class ConfigError(PlkrfError, ValueError):
    """Invalid model, training or run configuration."""


class DataError(PlkrfError):
    """Dataset content is missing or insufficient."""


class IngestionError(DataError):
    """A dataset file could not be parsed; the message names the file."""


class CheckpointError(PlkrfError):
    """A checkpoint container is malformed or of an unknown version."""
