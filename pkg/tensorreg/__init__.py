"""
tensorreg
=========

Reduced-rank tensor-on-tensor regression (Tucker, CP, OP, TR formats) with
tensor-variate normal errors, BIC rank search, asymptotic inference and
TANOVA testing with Wilks' Lambda.
"""

from tensorreg.errors import (
    BudgetExceededError,
    ConfigError,
    DegenerateScaleError,
    ModelSelectionError,
    RankError,
    SingularSystemError,
    TensorFileError,
    TensorRegError,
    TensorShapeError,
)
from tensorreg.estimation import ToTRFit, ToTRSpec, fit, load_fit, predict, residuals, save_fit
from tensorreg.tensor_core import DenseTensor

__all__ = [
    "BudgetExceededError",
    "ConfigError",
    "DegenerateScaleError",
    "DenseTensor",
    "ModelSelectionError",
    "RankError",
    "SingularSystemError",
    "TensorFileError",
    "TensorRegError",
    "TensorShapeError",
    "ToTRFit",
    "ToTRSpec",
    "fit",
    "load_fit",
    "predict",
    "residuals",
    "save_fit",
]
