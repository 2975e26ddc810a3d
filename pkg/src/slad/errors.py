"""Exception types raised across the package."""


class SladError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SladError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(SladError, RuntimeError):
    """An object is used in a state it does not support (e.g. a stale cache)."""


class TrainingError(SladError, RuntimeError):
    """Optimization produced non-finite values."""


class IngestionError(SladError, ValueError):
    """A data file could not be read into a dataset."""


class ProtocolError(SladError, ValueError):
    """A train/test protocol cannot be applied to the given data."""


class AblationInapplicableError(SladError, ValueError):
    """An ablation variant cannot handle the data it was given."""


class ModelLoadError(SladError, ValueError):
    """A model file is corrupt, truncated, or of an unsupported version."""


class MetricError(SladError, ValueError):
    """A metric is undefined for the given labels."""
