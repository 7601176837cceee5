"""Exception hierarchy shared across the package."""


class DPMError(Exception):
    """Base class for all package errors."""


class ConfigError(DPMError, ValueError):
    pass


class ShapeError(DPMError, ValueError):
    pass


class NumericError(DPMError, ArithmeticError):
    pass


class EmptyMaskError(NumericError):
    """Raised when an overlap measure has an empty denominator."""


class DegenerateBatchError(DPMError, ValueError):
    pass


class SamplingError(DPMError, ValueError):
    pass


class StagingError(DPMError, RuntimeError):
    pass


class ValidationError(DPMError, ValueError):
    """Malformed manifest or archive."""
