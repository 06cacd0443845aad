"""Early-exit networks trained class-incrementally, with task-wise logit correction and budgeted inference."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, EeclError, FormatError, ProtocolError  # noqa: E402,F401
