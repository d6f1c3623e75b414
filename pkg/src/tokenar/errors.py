"""Exception types shared across the package."""


class TokenARError(Exception):
    """Base class for all package errors."""


class InvalidArgument(TokenARError, ValueError):
    pass


class NumericError(TokenARError, ArithmeticError):
    pass


class DatasetIOError(TokenARError, OSError):
    """Raised for missing or corrupt dataset files; the message names the path."""


class VersionError(TokenARError):
    """Checkpoint and config disagree (format version or tensor shapes)."""
