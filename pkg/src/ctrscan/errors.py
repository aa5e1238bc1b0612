"""Exception hierarchy shared by all ctrscan modules."""


class CtrScanError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(CtrScanError, ValueError):
    """An argument is outside its documented domain."""


class FormatError(CtrScanError):
    """A file on disk is missing or does not follow the expected layout."""


class DimensionError(CtrScanError, ValueError):
    """Array shapes disagree."""


class ValidationError(CtrScanError, ValueError):
    """Data violates a content invariant (NaN, negative counts, bad labels)."""


class TrainingError(CtrScanError):
    """Optimisation cannot proceed (non-finite gradients, missing stage)."""


class NumericError(CtrScanError, ArithmeticError):
    """A forward computation produced non-finite values."""


class MetricUndefinedError(CtrScanError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
