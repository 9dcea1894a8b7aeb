"""Exception hierarchy shared by all modules."""


class SeelabError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(SeelabError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class NumericalFailureError(SeelabError, ArithmeticError):
    """A linear solve or regression could not be carried out reliably."""


class DivergenceError(NumericalFailureError):
    """A simulated state became non-finite.

    Attributes
    ----------
    path, step : int
        First offending path index and time step.
    """

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class ConvergenceError(NumericalFailureError):
    """A fixed-point iteration stopped before reaching its tolerance."""

    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class UnsupportedProblemError(SeelabError):
    """The problem lacks a derivative callback needed by an operation."""


class ConfigurationError(SeelabError, ValueError):
    """An experiment or run configuration is invalid."""
