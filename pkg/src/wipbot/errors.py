"""Exception types shared across the package."""


class WipbotError(Exception):
    """Base class for package errors."""


class AssemblyError(WipbotError):
    """Leg linkage cannot close its kinematic loop at the requested angle."""


class OptimizationError(WipbotError):
    """No feasible linkage design found inside the given bounds."""


class DareSolverError(WipbotError):
    """Riccati iteration failed to converge or inputs were out of domain."""


class IntegrationFault(WipbotError):
    """Physics integration produced a non-finite state."""


class ValidationError(WipbotError):
    """A config file or message failed schema or limit validation."""
