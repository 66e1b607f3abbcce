"""Exception types shared across the package."""


class CspiError(Exception):
    """Base class for all package errors."""


class DomainError(CspiError, ValueError):
    """Invalid parameter value or point outside the model's domain."""


class TruncationError(CspiError):
    """Fock-space cutoff too small: truncated weight above tolerance."""


class CapacityError(CspiError):
    """Requested Hilbert space or search exceeds the configured bounds."""


class SingularOverlapError(CspiError, ZeroDivisionError):
    """Vanishing coherent-state overlap where a normalized element is needed."""


class OptimizationError(CspiError):
    """Saddle search failed to converge; carries the best point found."""

    def __init__(self, message, best_point=None, residual=None):
        super().__init__(message)
        self.best_point = best_point
        self.residual = residual


class DerivativeError(CspiError):
    """Finite-difference noise or step outside the validated range."""


class BranchError(CspiError):
    """Log of a non-positive determinant ratio on the Matsubara grid."""

    def __init__(self, message, omega=None):
        super().__init__(message)
        self.omega = omega


class UnwrapError(CspiError):
    """Phase step of pi or more between consecutive samples; refine sampling."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class QuadratureError(CspiError):
    """Adaptive quadrature exhausted its budget before reaching tolerance."""


class ConfigError(CspiError):
    """Missing or invalid entry in a run configuration."""
