"""Exception hierarchy shared by every module."""


class TrustRouteError(Exception):
    """Base class for all package errors."""


class StructuralError(TrustRouteError, ValueError):
    """Shapes, index sets or sparsity patterns do not line up."""


class InfeasibleTopologyError(StructuralError):
    """A non off-ramp link has no successor, so its column sum cannot be 1."""


class DomainError(TrustRouteError, ValueError):
    """A function was evaluated outside its domain (e.g. negative density)."""


class NumericalError(TrustRouteError, ArithmeticError):
    """NaN or negative state produced during simulation."""

    def __init__(self, message, link=None, step=None):
        super().__init__(message)
        self.link = link
        self.step = step


class AssumptionViolation(TrustRouteError):
    """Second-order / LICQ / strict complementarity certificate failed."""

    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = tuple(failed)


class DependencyError(TrustRouteError):
    """A required upstream quantity (e.g. the sensitivity block) is missing."""


class ScenarioFileError(TrustRouteError, ValueError):
    """Scenario file could not be parsed; message is anchored to a field path."""
