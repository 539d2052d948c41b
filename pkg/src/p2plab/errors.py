"""Exception hierarchy shared across the package."""


class P2PLabError(Exception):
    """Base class for all package errors."""


class ConfigError(P2PLabError):
    pass


class DataError(P2PLabError):
    pass


class TopologyError(DataError):
    pass


class DimensionError(P2PLabError, ValueError):
    pass


class NumericalError(P2PLabError):
    pass


class DivergenceError(NumericalError):
    """Newton-Raphson did not converge; carries the last mismatch norm."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class SolverError(NumericalError):
    """Raised when the convex solver detects infeasibility or unboundedness."""

    def __init__(self, message="Model Infeasible or Unbounded", status="infeasible"):
        super().__init__(message)
        self.status = status
