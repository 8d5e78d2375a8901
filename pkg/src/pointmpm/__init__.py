"""Masked point modeling on point clouds with multi-choice token supervision.

Desk-scale, CPU-only stack: a numpy reverse-mode autodiff engine, point-cloud
geometry ops, a dVAE patch tokenizer, a transformer encoder, the soft-target
machinery, and a training/evaluation harness with a CLI.
"""

from .autodiff import (
    Expression,
    NonFiniteError,
    ShapeMismatchError,
    Tensor,
    UnboundLeafError,
    evaluate,
    grad_check,
    gradient,
)
from .pointops import MaskSet, PatchSet, PointCloud

__version__ = "0.1.0"

__all__ = [
    "Expression",
    "Tensor",
    "NonFiniteError",
    "ShapeMismatchError",
    "UnboundLeafError",
    "evaluate",
    "gradient",
    "grad_check",
    "PointCloud",
    "PatchSet",
    "MaskSet",
    "__version__",
]
