"""Hessian martingales: entropic martingale transport, calibration and simulation."""

from .errors import (
    ArbitrageSuspected,
    ConvergenceError,
    DegenerateSupportError,
    DomainError,
    EvaluationError,
    HessmartError,
    OutsideHullError,
    ReferenceSupportError,
)
from .measures import (
    AffineFrame,
    DiscreteMeasure,
    affine_hull_dimension,
    expectation,
    mean,
    reduce_to_affine_hull,
)
from .potential import LegendreConfig, LegendreResult, Potential

__version__ = "0.1.0"
