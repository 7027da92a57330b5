"""Exception types shared across the pipeline."""


class MalformedFileError(ValueError):
    """A file exists but its contents violate the documented format."""


class InsufficientHistoryError(ValueError):
    """A sequence operation was asked for more look-back than exists."""


class DataIntegrityError(ValueError):
    """Cross-referenced records (frames, poses, matches) do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite math."""


class UndefinedAUCError(ValueError):
    """ROC/AUC requested for a label set with only one class."""
