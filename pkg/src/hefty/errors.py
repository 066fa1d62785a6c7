"""Exception types raised across the package."""


class HeftyError(Exception):
    """Base class for all package errors."""


class FitError(HeftyError, ValueError):
    """A distribution could not be fitted to the supplied sample."""


class NumericalError(HeftyError, ArithmeticError):
    """A numerical routine failed (bracket failure, singular system, ...)."""


class InfiniteMeanError(HeftyError, ValueError):
    """The requested mixture mean does not exist (tail shape <= 1)."""


class AttainabilityError(HeftyError, ValueError):
    """A target value lies outside the range a parameter sweep can reach."""

    def __init__(self, message, low=None, high=None):
        super().__init__(message)
        self.low = low
        self.high = high


class DomainError(HeftyError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularDesignError(NumericalError):
    """The design matrix is not of full column rank."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class SeparationError(NumericalError):
    """Logistic regression data are (quasi-)perfectly separated."""


class DegenerateScaleError(HeftyError, ValueError):
    """A scale estimate is zero, so no tuning constant can be derived."""


class VarianceUndefinedError(HeftyError, ValueError):
    """An arm has fewer than two observations."""


class CovariateError(HeftyError, ValueError):
    """A covariate-assisted method was called without usable covariates."""


class PlanError(HeftyError, ValueError):
    """A cross-fitting plan is invalid for the data it is applied to."""


class SimulationFailure(HeftyError, RuntimeError):
    """Too many replications of a simulation suite failed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
