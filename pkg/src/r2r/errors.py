"""Exception types raised across the package."""


class R2RError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(R2RError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class DegenerateOutput(ShapeMismatch):
    pass


class NonFiniteLoss(R2RError, ArithmeticError):
    pass


class NonFiniteGradient(R2RError, ArithmeticError):
    pass


class UnadaptableConsumer(R2RError):
    """A consumer of a widened volume cannot absorb the new channels."""


class OddChannelCount(R2RError, ValueError):
    pass


class InvalidFinalSigma(R2RError, ValueError):
    """The last nonlinearity of a zero-initialised block does not map 0 to 0."""


class WidthNotIncreased(R2RError, ValueError):
    pass


class NonIdempotentActivation(R2RError, ValueError):
    pass


class UnsupportedShortcutKind(R2RError, ValueError):
    pass


class EmptyContext(R2RError, ValueError):
    pass


class NoInsertionPoint(R2RError, LookupError):
    pass


class MalformedFile(R2RError, ValueError):
    pass


class LabelOutOfRange(R2RError, ValueError):
    pass


class ZeroStd(R2RError, ValueError):
    pass


class InvalidMultiplier(R2RError, ValueError):
    pass


class ConfigError(R2RError, ValueError):
    pass


class PreservationError(R2RError):
    """A transform that should preserve the network function did not."""
