"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` (or any other :class:`AUMNError`) to exit code 2.
"""


class AUMNError(Exception):
    """Base class for all package errors."""


class ValidationError(AUMNError, ValueError):
    """Rejected input: bad shapes, out-of-range config values, malformed files."""


class ShapeError(ValidationError):
    pass


class NumericalError(AUMNError, ArithmeticError):
    """A computation produced a non-finite value."""


class FeatureFormatError(ValidationError):
    """A feature file could not be parsed."""


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


class DimensionOverflowError(FeatureFormatError):
    pass


class ManifestError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass
