"""Exception hierarchy shared by every module."""


class StratextError(Exception):
    """Base class for all package errors."""


class UsageError(StratextError, ValueError):
    """Bad arguments: dimension mismatch, index out of range, budget exceeded."""


class ConfigurationError(StratextError, ValueError):
    """A model or config value violates its invariants."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class UnsupportedConfigurationError(StratextError):
    """The requested operation is undefined for this model (e.g. a Hessian at a kink)."""


class ModelViolationError(StratextError):
    """The potential behaved as if it were not concave."""


class NumericalError(StratextError):
    """A linear solve or similar numerical step failed."""


class ConvergenceError(StratextError):
    """An iterative method ran out of iterations.

    ``best`` holds the best iterate seen and ``residual`` its KKT residual.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class TrainingError(StratextError):
    """Training produced a non-finite loss or gradient."""
