"""Exception types shared across the package."""


class ViclabError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(ViclabError, ValueError):
    """Raised when an argument fails a shape, finiteness, or domain check."""


class ConfigurationError(ViclabError, ValueError):
    """Raised when a configuration is inconsistent or incomplete."""


class DecompositionError(ViclabError, RuntimeError):
    """Raised when a matrix factorization cannot be computed."""


class DegenerateWindowError(ViclabError, RuntimeError):
    """Raised when a regression window carries no usable excitation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EstimationError(ViclabError, RuntimeError):
    """Raised when an estimation pass cannot produce a result."""


class StepSizeError(ViclabError, RuntimeError):
    """Raised when an iterative solver detects a diverging step size."""


class DivergenceError(ViclabError, RuntimeError):
    """Raised when an integrated state becomes non-finite."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ParseError(ViclabError, ValueError):
    """Raised on malformed data files; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class FormatVersionError(ParseError):
    """Raised when a file declares an unsupported format version."""
