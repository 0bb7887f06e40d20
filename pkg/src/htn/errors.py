"""Exception types shared across the package."""


class HtnError(Exception):
    """Base class for all package-specific errors."""


class ContractionError(HtnError):
    """Paired tensor axes have mismatched lengths."""


class InvalidArgumentError(HtnError, ValueError):
    """An argument violates a documented precondition."""


class DirectionViolationError(HtnError):
    """Isometrization requested from a larger space into a smaller one."""


class DegenerateInputError(HtnError):
    """Matrix is identically zero; no polar direction exists."""


class ShapeMismatchError(HtnError):
    """Encoded state and model disagree on the number of sites."""


class EncodingRangeError(HtnError, ValueError):
    """Feature value outside the [0, 1] encoding domain."""


class VanishedStateError(HtnError):
    """Output state was fully post-selected away (trace below floor)."""


class NumericalDomainError(HtnError):
    """Matrix function evaluated outside its numerical domain."""


class CacheConsistencyError(HtnError):
    """Cached environments disagree with a from-scratch contraction."""


class FullyPostSelectedError(HtnError):
    """Circuit retention probability below floor; no shots survive."""


class FormatError(HtnError, ValueError):
    """Binary file does not match the expected format."""


class ParseError(HtnError, ValueError):
    """Text input could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDatasetError(HtnError, ValueError):
    """Dataset contains no samples."""
