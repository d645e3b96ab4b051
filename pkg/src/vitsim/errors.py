"""Exception types shared across the package."""


class VitsimError(Exception):
    """Base class for all package errors."""


class InvalidArgument(VitsimError, ValueError):
    """Raised when an input violates a documented precondition."""


class InvariantViolation(VitsimError, RuntimeError):
    """Raised when an internal consistency check fails."""
