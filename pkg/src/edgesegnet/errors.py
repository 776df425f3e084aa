"""Exception hierarchy shared by every edgesegnet module."""


class EdgeSegError(Exception):
    """Base class for all library errors."""


class ShapeError(EdgeSegError, ValueError):
    """Tensor extents are incompatible with an operation.

    ``failures`` holds ``(node, message)`` pairs when raised by shape
    inference over a whole network.
    """

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])


class ArgumentError(EdgeSegError, ValueError):
    """A scalar argument is outside its legal domain."""


class ConfigError(EdgeSegError, ValueError):
    """A network config violates one or more structural invariants."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("invalid network config:\n  " + "\n  ".join(self.errors))


class DataError(EdgeSegError, ValueError):
    """Labels or images do not satisfy their data contract."""


class UsageError(EdgeSegError, RuntimeError):
    """An API was called out of order or with mismatched state."""


class CheckpointError(EdgeSegError):
    """Base class for checkpoint decoding failures."""


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


class ConsistencyError(CheckpointError):
    pass


class NumericalError(EdgeSegError, ArithmeticError):
    """A forward pass produced non-finite values."""
