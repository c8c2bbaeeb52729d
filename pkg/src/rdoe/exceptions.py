"""Exception hierarchy shared by all modules."""


class RDOEError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class NetworkError(RDOEError):
    def __init__(self, message: str, element: str | None = None, line: int | None = None):
        super().__init__(message)
        self.element = element
        self.line = line


class PowerFlowError(RDOEError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, message: str, residual_norm: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class SingularJacobian(PowerFlowError):
    pass


class DomainError(RDOEError, ValueError):
    """Objective evaluated outside its domain."""


class SolverFailure(Exception):
    """The NLP solver stopped without a KKT point (CLI exit code 2).

    ``best`` holds the last iterate and ``residuals`` the KKT error terms.
    """

    def __init__(self, message: str, best=None, residuals: dict | None = None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals or {}


class MaxIterations(SolverFailure):
    pass


class RestorationFailure(SolverFailure):
    pass
