"""Exception types shared across the package."""


class DatasetFormatError(ValueError):
    """Base class for dataset parsing failures.

    ``row`` is the 0-based data row the failure was detected at, or None
    when the problem is not attributable to a single row.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class MalformedHeaderError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


class NonFiniteValueError(DatasetFormatError):
    pass


class UnknownSplitTagError(DatasetFormatError):
    pass


class EmptyDatasetError(DatasetFormatError):
    pass


class DegenerateRepresentationError(RuntimeError):
    """A representation row has (near-)zero norm; cosine similarity is
    undefined.  Usually a symptom of collapsed training."""


class EmptySelectionError(RuntimeError):
    """No pair in the batch was selected for the similarity loss."""


class NonFiniteGradientError(RuntimeError):
    """A gradient or an updated parameter became NaN/inf."""

    def __init__(self, phase, detail=""):
        msg = f"non-finite values during {phase}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.phase = phase


class ConfigError(ValueError):
    """Contradictory or out-of-range run configuration."""
