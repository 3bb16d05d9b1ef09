"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3, exhausted resource budgets with 4.
"""


class SemiflowError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigError(SemiflowError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class StructuralError(SemiflowError, ValueError):
    """The map violates the Markov structure (image not a union of elements)."""


class NormalizationError(SemiflowError, ValueError):
    """Single-step expansion is not uniform; an induced iterate is required."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class DomainError(SemiflowError, ValueError):
    """A point lies outside the domain of an inverse branch."""


class PreconditionError(SemiflowError, ValueError):
    """An operation was called outside the regime where it is defined."""


class NumericalError(SemiflowError, ArithmeticError):
    """An iterative method failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class FitError(NumericalError):
    """No usable data window for a regression."""


class ResourceError(SemiflowError, MemoryError):
    """A configured work budget (e.g. number of branch words) was exceeded."""

    exit_code = 4
