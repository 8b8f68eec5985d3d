"""Exception types shared across the package."""


class RmisoError(Exception):
    """Base class for package errors."""


class ConfigurationError(RmisoError, ValueError):
    """Invalid construction parameters or configuration."""


class DomainError(RmisoError, ValueError):
    """Argument outside the domain of an operation (bad index, shape, infeasible point)."""


class SolverError(RmisoError, RuntimeError):
    """An iterative kernel stopped without meeting its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EstimationError(RmisoError, RuntimeError):
    """A Monte Carlo estimate was rejected (e.g. too many censored samples)."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate
