"""Exception types shared across the package."""


class HemfError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefiniteError(HemfError):
    """A matrix required to be symmetric positive definite failed to factor."""


class NonFiniteError(HemfError):
    """A NaN or Inf surfaced in a quantity that must stay finite.

    The message carries a ``side.term`` tag locating the offending bound term.
    """


class DataFormatError(HemfError):
    """A rating file violated its declared grammar.

    Attributes
    ----------
    line_number : int or None
        1-based line where parsing failed, when known.
    """

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class DegenerateSplitError(HemfError):
    """A train/test split produced an empty test set."""


class DivergenceError(HemfError):
    """An SGD factor norm exceeded the divergence guard.

    Attributes
    ----------
    entity : tuple
        ``(side, index)`` of the diverging factor vector.
    """

    def __init__(self, message, entity=None):
        super().__init__(message)
        self.entity = entity


class CheckpointError(HemfError):
    """A checkpoint file is corrupt, truncated, or has an unsupported version."""
