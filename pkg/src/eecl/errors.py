"""Exception types shared across the package."""


class EeclError(Exception):
    """Base class for all package errors."""


class DimensionError(EeclError, ValueError):
    pass


class StateError(EeclError, RuntimeError):
    pass


class NumericError(EeclError, ArithmeticError):
    pass


class ConfigError(EeclError, ValueError):
    """Invalid experiment or model configuration (CLI exit code 2)."""


class ProtocolError(EeclError, RuntimeError):
    """Continual-learning protocol violated, e.g. tasks added out of order."""


class DataError(EeclError, ValueError):
    """Unusable input data (CLI exit code 3)."""


class FormatError(DataError):
    """Malformed on-disk dataset; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateTaskError(DataError):
    """A task slice is empty after excluding the predicted class."""


class SchemaVersionError(EeclError, ValueError):
    pass
