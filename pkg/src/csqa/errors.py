"""Exception and warning types shared across the package."""


class CsqaError(Exception):
    """Base class for all errors raised by csqa."""


class DimensionError(CsqaError, ValueError):
    """A tensor shape does not satisfy an operation's contract."""


class ConfigurationError(CsqaError, ValueError):
    """A hyper-parameter or configuration value is invalid."""


class UsageError(CsqaError):
    """An API or CLI entry point was called incorrectly."""


class NonFiniteError(CsqaError, RuntimeError):
    """A NaN or Inf appeared in the loss or in a named activation."""


class ShortfallWarning(UserWarning):
    """NMS produced fewer survivors than the number of parts requested."""

    def __init__(self, message, count):
        super().__init__(message)
        self.count = count


class DegenerateBoxWarning(UserWarning):
    """A crop box had (near) zero area and was widened to a 2x2 window."""
