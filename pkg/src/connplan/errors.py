"""Exception hierarchy shared across the planner modules."""


class ConnplanError(Exception):
    """Base class for every error raised by this package."""


class DomainError(ConnplanError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(ConnplanError, ValueError):
    """Inconsistent or malformed configuration."""


class NumericalError(ConnplanError, ArithmeticError):
    """A numerical routine failed (non-convergence, singular system, ...)."""


class BarrierViolation(ConnplanError):
    """The connectivity metric is at or below the lower limit epsilon.

    Distinct from :class:`NumericalError`: callers treat it as an
    infeasible step rather than a failure.
    """

    def __init__(self, lambda2, epsilon):
        super().__init__(f"metric {lambda2:.6g} is not above epsilon {epsilon:.6g}")
        self.lambda2 = lambda2
        self.epsilon = epsilon


class GradientUndefinedError(ConnplanError):
    """The metric is not differentiable at the requested point."""


class ProtocolError(ConnplanError):
    """Exchange messages violate the consensus protocol."""


class InfeasibleMissionError(ConnplanError):
    """No connectivity-feasible initial trajectory could be constructed."""
