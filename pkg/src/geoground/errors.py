"""Exception types shared across the package."""


class GeogroundError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GeogroundError, ValueError):
    """Operand shapes or lengths are inconsistent."""


class ConfigError(GeogroundError, ValueError):
    """A configuration value is out of range, unknown, or malformed."""


class DataError(GeogroundError, ValueError):
    """A data record violates its contract (e.g. a label out of range)."""


class StateError(GeogroundError, RuntimeError):
    """An object was used before required state was populated."""


class NumericError(GeogroundError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(GeogroundError, RuntimeError):
    """Training diverged. Carries the step index at which it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(GeogroundError, ValueError):
    """A serialized artifact violates the file-format contract."""
