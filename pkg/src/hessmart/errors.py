"""Exception types shared across the package."""


class HessmartError(Exception):
    """Base class for all package errors."""


class EvaluationError(HessmartError, ValueError):
    """A function returned a non-finite value at an atom."""


class DomainError(HessmartError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class OutsideHullError(DomainError):
    """Legendre target is not strictly inside the support hull of the reference measure."""


class ConvergenceError(HessmartError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateSupportError(HessmartError, ValueError):
    """The target measure is concentrated on a hyperplane; reduce with
    :func:`hessmart.measures.reduce_to_affine_hull` first."""


class ReferenceSupportError(HessmartError, ValueError):
    """Reference supports are not nested across maturities."""

    def __init__(self, message, maturity=None, node=None):
        super().__init__(message)
        self.maturity = maturity
        self.node = node


class ArbitrageSuspected(HessmartError, RuntimeError):
    """Calibration objective is unbounded below along some coefficient direction.

    Attributes
    ----------
    direction : list of ndarray
        Normalized per-maturity coefficient direction along which the dual
        objective keeps decreasing.
    slope : float
        Estimated asymptotic slope of the objective along ``direction``.
    envelopes : list
        Per-maturity lower-convex-envelope diagnostics of the direction payoffs.
    """

    def __init__(self, message, direction=None, slope=float("nan"), envelopes=None, state=None):
        super().__init__(message)
        self.direction = direction
        self.slope = slope
        self.envelopes = envelopes or []
        self.state = state
