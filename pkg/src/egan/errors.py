"""Exception types shared across the package."""


class EganError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EganError, ValueError):
    pass


class ZeroProbabilityEntropy(EganError, ValueError):
    """Entropy gradient requested at a zero-probability point."""


class InvalidDuals(EganError, ValueError):
    """Support multipliers violate complementary slackness."""


class DivisionByZeroSupport(EganError, ZeroDivisionError):
    """Generator assigns zero mass to a point in the data support."""


class ShapeMismatch(EganError, ValueError):
    pass


class DegenerateBatch(EganError, ValueError):
    """Batch normalization in train mode needs at least two rows."""


class KTooLarge(EganError, ValueError):
    pass


class MissingEntropyTerm(EganError, ValueError):
    pass


class EmptySampleSet(EganError, ValueError):
    pass


class GridMismatch(EganError, ValueError):
    pass


class NonFiniteError(EganError, FloatingPointError):
    """A training loss became NaN or infinite."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class DisconnectedNodeWarning(UserWarning):
    """A parameter did not receive any gradient from the loss."""


class DegenerateDirectionWarning(UserWarning):
    pass
