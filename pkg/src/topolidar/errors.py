"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: ConfigError and usage
problems exit 1, DataFormatError/VersionError exit 2, NumericalError
exits 3.
"""


class TopoLidarError(Exception):
    """Base class for all package errors."""


class ShapeError(TopoLidarError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(TopoLidarError, ValueError):
    """Invalid configuration value, key, or precondition."""


class DataFormatError(TopoLidarError, ValueError):
    """Malformed input file or on-disk container."""


class VersionError(DataFormatError):
    """Incompatible checkpoint/container version or dimensions."""


class NumericalError(TopoLidarError, ArithmeticError):
    """A numeric invariant was violated (NaN/Inf, degenerate statistics)."""


class EmptyInputError(TopoLidarError, ValueError):
    """An operation received an empty point set or image."""


class InvariantError(TopoLidarError, RuntimeError):
    """A structural invariant was violated (e.g. graph used before edges exist)."""
