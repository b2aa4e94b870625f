"""Preconditioned sparse linear regression for random-support ground truths."""
from .core import (
    DesignMatrix,
    InvariantViolation,
    NoiseKind,
    NoiseModel,
    NumericalFailure,
    Preconditioner,
    Support,
    apply_basis_change,
    coeff_under_inverse_transpose,
    gram_on_support,
)

__version__ = "0.1.0"
