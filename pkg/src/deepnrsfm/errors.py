"""Exception and warning types shared across the package."""


class NRSfMError(Exception):
    """Base class for all package errors."""


class ShapeError(NRSfMError, ValueError):
    pass


class NonFiniteError(NRSfMError, ValueError):
    pass


class NonPositiveDepth(NRSfMError, ValueError):
    pass


class NonPositiveTz(NRSfMError, ValueError):
    pass


class AllOccluded(NRSfMError, ValueError):
    """Raised when a sample has no visible keypoint."""


class ZeroCode(NRSfMError, ArithmeticError):
    """Raised when the last-layer block code vanishes and cannot be factorized."""


class MissingBBox(NRSfMError, ValueError):
    pass


class SchemaError(NRSfMError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VersionError(SchemaError):
    pass


class RegimeMismatch(NRSfMError, ValueError):
    pass


class NonFiniteLoss(NRSfMError, FloatingPointError):
    pass


class ConfigError(NRSfMError, ValueError):
    pass


class DegenerateSpectrum(RuntimeWarning):
    """The SVD-based projection is not unique for this input."""


class ZeroCodeWarning(RuntimeWarning):
    pass
