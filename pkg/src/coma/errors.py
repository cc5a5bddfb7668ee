"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class ComaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ComaError, ValueError):
    """Invalid shapes, arguments or configuration values."""


class UsageError(ComaError, RuntimeError):
    """An API was called in a state where it cannot work (e.g. backward on a non-scalar)."""


class NumericalError(ComaError, ArithmeticError):
    """Non-finite values or a failed numerical check."""


class InvariantError(ComaError, AssertionError):
    """An internal invariant was violated."""


class FormatError(ComaError, OSError):
    """A file on disk is corrupt, truncated or of the wrong version."""
