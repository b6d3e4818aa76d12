"""Exception types shared across the package."""


class SmoeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SmoeError):
    """Shape or axis mismatch between operands."""


class ContractError(SmoeError):
    """An operation was called in a way that violates its contract."""


class ConfigError(SmoeError):
    """Invalid configuration; the message names the offending fields."""


class NumericError(SmoeError):
    """Non-finite or out-of-domain values where finite input is required."""


class FormatError(SmoeError):
    """Malformed file content. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
