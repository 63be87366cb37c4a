"""Exception hierarchy shared by every module of the package."""


class McglmError(Exception):
    """Base class for all package errors."""

    #: short machine-readable class name surfaced by the CLI
    code = "error"


class ConfigError(McglmError, ValueError):
    code = "config_error"


class DataError(McglmError, ValueError):
    code = "data_error"


class DomainError(McglmError, ValueError):
    code = "domain_error"


class ShapeError(McglmError, ValueError):
    code = "shape_error"


class NumericalError(McglmError, ArithmeticError):
    code = "numerical_error"


class InvalidDispersionError(NumericalError):
    code = "invalid_dispersion"


class NotPositiveDefiniteError(NumericalError):
    """Raised when a covariance matrix fails its Cholesky factorization.

    ``tau`` carries the dispersion parameters that produced the failure, when
    known, so callers can tell the optimizer left the feasible region.
    """

    code = "not_positive_definite"

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class SingularSensitivityError(NumericalError):
    code = "singular_sensitivity"


class SingularInformationError(NumericalError):
    code = "singular_information"


class NonTestableHypothesisError(NumericalError):
    code = "non_testable_hypothesis"


class IncompatiblePredictorsError(McglmError, ValueError):
    code = "incompatible_predictors"


class TermError(McglmError, KeyError):
    code = "term_error"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SelectionError(McglmError, ValueError):
    code = "selection_error"


class DegenerateGridError(McglmError, ValueError):
    code = "degenerate_grid"


class ConvergenceError(McglmError, RuntimeError):
    code = "non_convergence"
