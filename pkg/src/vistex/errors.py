"""Exception types shared across the package.

Data and protocol errors map to CLI exit code 2; usage errors to exit code 1.
"""


class VistexError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidSplitError(VistexError):
    """Raised when a base/novel class partition request is impossible."""


class InvalidConfigError(VistexError):
    """Raised when a configuration violates its invariants."""


class InsufficientDataError(VistexError):
    """Raised when a class does not have enough images for the requested shots."""


class InvalidPromptError(VistexError):
    """Raised for empty or inconsistent prompt construction."""


class InvalidInputError(VistexError):
    """Raised for empty or malformed operation inputs."""


class InvalidStageError(VistexError):
    """Raised when a stage index is outside [0, L]."""


class FeatureShapeError(VistexError):
    """Raised when tensor shapes do not match the model configuration."""


class ContaminationError(VistexError):
    """Raised when novel-class data reaches a training path. Hard failure."""


class ProtocolError(VistexError):
    """Raised when an evaluation episode leaks support images into queries."""


class CheckpointCorruptionError(VistexError):
    """Raised when a checkpoint fails manifest validation."""


class NumericError(VistexError):
    """Raised when a numeric verification produces non-finite values."""
