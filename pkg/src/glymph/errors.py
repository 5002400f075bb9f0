"""Exception types shared by every module."""


class GlymphError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GlymphError, ValueError):
    """Inputs are inconsistent or violate a documented precondition."""


class DomainError(GlymphError, ValueError):
    """A point or value lies outside the region where an operation is defined."""


class NumericalError(GlymphError, ArithmeticError):
    """A numerical procedure failed to reach its tolerance.

    Attributes:
        iterations: iterations performed before giving up (if meaningful).
        residual: last relative residual (if meaningful).
        step: time-step or iteration index at which the failure occurred.
    """

    def __init__(self, message, iterations=None, residual=None, step=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.step = step
