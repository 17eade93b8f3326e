"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage/config errors exit 1, data and
schema errors exit 2, numerical failures exit 3.
"""


class PosekitError(Exception):
    """Base class for all toolkit errors."""


class UsageError(PosekitError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(UsageError):
    """A configuration value is out of its allowed range."""


class DataError(PosekitError):
    """Base class for errors caused by malformed input data."""


class ParseError(DataError):
    """Input text could not be parsed; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class SchemaError(DataError):
    """Parsed data violates the documented schema; names the offending field."""


class UnsupportedVersionError(DataError):
    """The document declares a format version this build does not support."""


class UnalignableError(DataError):
    """The driving sequence has no visible torso to align against."""


class ShapeError(UsageError):
    """Operand shapes are incompatible; the message names both shapes."""


class NumericalError(PosekitError):
    """A computation produced a non-finite value."""
