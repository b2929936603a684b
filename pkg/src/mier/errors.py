"""Exception types shared across the package."""


class MierError(Exception):
    """Base class for all package errors."""


class ShapeError(MierError, ValueError):
    """An input's dimensions do not match the declared network or env shape."""


class NumericError(MierError, ArithmeticError):
    """A loss, gradient, or intermediate value became non-finite."""


class UsageError(MierError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(MierError, ValueError):
    """A config file or key is malformed, unknown, or of the wrong type."""


class CheckpointFormatError(MierError, ValueError):
    """A checkpoint file has a bad magic, version, or truncated payload."""


class BufferNotReady(MierError):
    """Retryable: the replay buffer has no task with enough data yet."""
