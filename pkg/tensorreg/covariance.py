"""
Per-mode scale models
=====================

Scale-matrix updates used inside block relaxation:

- unstructured: the normalized MLE (ADJUST), Sigma_k(1,1) = 1 with the removed
  scalar folded into sigma2
- ar1: Sigma_k(i, j) = rho^|i-j|
- equicorr: Sigma_k = (1 - rho) I + rho 11'
- identity: Sigma_k = I, never updated

The parametric kinds are correlation matrices, so their (1,1) entry is 1 by
construction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from tensorreg.config import normalize_scale_kind
from tensorreg.errors import DegenerateScaleError, TensorShapeError
from tensorreg.tensor_core import multi_mode_apply
from tensorreg.tvn import spd_inverse, spd_logdet

logger = logging.getLogger(__name__)

RHO_MARGIN = 1e-6
RHO_XTOL = 1e-8


@dataclass(frozen=True)
class ScaleModel:
    kind: str = "unstructured"
    rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_scale_kind(self.kind))

    @classmethod
    def parse(cls, value):
        if isinstance(value, ScaleModel):
            return value
        return cls(value)

    def rho_bounds(self, m):
        if self.kind == "ar1":
            return -1.0, 1.0
        if self.kind == "equicorr":
            return (-1.0 / (m - 1) if m > 1 else -1.0), 1.0
        raise ValueError(f"scale model '{self.kind}' has no correlation parameter")

    def matrix(self, m, rho=None):
        rho = self.rho if rho is None else rho
        if self.kind in ("unstructured", "identity") or m == 1:
            return np.eye(m)
        rho = 0.0 if rho is None else float(rho)
        lo, hi = self.rho_bounds(m)
        if not lo < rho < hi:
            raise DegenerateScaleError(f"rho = {rho} outside the positive-definite range ({lo}, {hi})")
        if self.kind == "ar1":
            idx = np.arange(m)
            return rho ** np.abs(idx[:, None] - idx[None, :])
        return (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))

    def param_count(self, m):
        """Free parameters of Sigma_k after the (1,1) normalization."""
        if self.kind == "unstructured":
            return m * (m + 1) // 2 - 1
        if self.kind in ("ar1", "equicorr"):
            return 1 if m > 1 else 0
        return 0


@dataclass(frozen=True, eq=False)
class ModeSSE:
    matrix: np.ndarray
    df: int

    @property
    def trace(self):
        return float(np.trace(self.matrix))


@dataclass(frozen=True)
class StructuredScaleFit:
    matrix: np.ndarray
    rho: float
    boundary: bool


# ==============================================================================
# SUMS OF SQUARES
# ==============================================================================

def mode_sse_array(resid: np.ndarray, precisions, j: int) -> np.ndarray:
    """S_k for a residual stack (n, m_1..m_p) and per-mode precisions; j is 0-based."""
    p = resid.ndim - 1
    axes = [q + 1 for q in range(p) if q != j]
    weighted = multi_mode_apply(resid, [precisions[q] for q in range(p) if q != j], axes)
    summed = [0] + axes
    s = np.tensordot(resid, weighted, axes=(summed, summed))
    return (s + s.T) / 2


def mode_sse(residuals, scales, k: int) -> ModeSSE:
    """S_k = sum_i Z_i(k) Sigma_-k^-1 Z_i(k)' with each Sigma_j^-1 applied on its own mode."""
    resid = np.stack([np.asarray(z, dtype=np.float64) for z in residuals])
    p = resid.ndim - 1
    if len(scales) != p:
        raise TensorShapeError(f"{len(scales)} scale matrices for residuals of order {p}")
    for q, s in enumerate(scales):
        if np.shape(s) != (resid.shape[q + 1],) * 2:
            raise TensorShapeError(f"Sigma_{q + 1} has shape {np.shape(s)}, mode size is {resid.shape[q + 1]}")
    if not 1 <= k <= p:
        raise TensorShapeError(f"mode index {k} out of range 1..{p}")
    precisions = [spd_inverse(np.asarray(s), f"Sigma_{q + 1}") for q, s in enumerate(scales)]
    df = resid.shape[0] * (resid[0].size // resid.shape[k])
    return ModeSSE(mode_sse_array(resid, precisions, k - 1), df)


# ==============================================================================
# SCALE UPDATES
# ==============================================================================

def adjust(df, sigma2, s) -> np.ndarray:
    """Unconstrained MLE S/(df sigma2), rescaled so entry (1,1) is exactly 1."""
    s = np.asarray(getattr(s, "matrix", s), dtype=np.float64)
    if df <= 0 or sigma2 <= 0:
        raise ValueError(f"adjust needs df > 0 and sigma2 > 0, got df={df}, sigma2={sigma2}")
    unconstrained = s / (df * sigma2)
    pivot = unconstrained[0, 0]
    if not pivot > 0:
        raise DegenerateScaleError("sum of squares has a zero (1,1) entry; first coordinate is degenerate")
    out = unconstrained / pivot
    out = (out + out.T) / 2
    out[0, 0] = 1.0
    return out


def _ar1_terms(s, rho):
    """(log|Sigma(rho)|, tr(Sigma(rho)^-1 S)) from the tridiagonal inverse."""
    m = s.shape[0]
    one_minus = 1.0 - rho * rho
    logdet = (m - 1) * np.log(one_minus)
    diag = np.diag(s)
    inner = diag[1:-1].sum() if m > 2 else 0.0
    off = np.diag(s, 1).sum()
    tr = (diag.sum() + rho * rho * inner - 2.0 * rho * off) / one_minus
    return logdet, tr


def _equicorr_terms(s, rho):
    m = s.shape[0]
    a = 1.0 - rho
    b = 1.0 + (m - 1) * rho
    logdet = (m - 1) * np.log(a) + np.log(b)
    tr = (np.trace(s) - rho / b * s.sum()) / a
    return logdet, tr


def structured_objective(kind, s, df, sigma2, rho):
    """Negative profile log-likelihood of a correlation parameter (up to constants).

    With `sigma2=None` the scalar variance is profiled out jointly, which is
    what the fitting loop uses.
    """
    terms = _ar1_terms if kind == "ar1" else _equicorr_terms
    logdet, tr = terms(s, rho)
    if sigma2 is None:
        m = s.shape[0]
        return 0.5 * df * logdet + 0.5 * df * m * np.log(max(tr, 1e-300))
    return 0.5 * df * logdet + tr / (2.0 * sigma2)


def fit_structured_scale(kind, s, df, sigma2=None) -> StructuredScaleFit:
    """Maximize the profile likelihood over rho on the open positive-definite interval.

    Args:
        kind: "ar1", "equicorr" or "identity".
        s: Mode sum of squares S_k (matrix or ModeSSE).
        df: n * m_-k.
        sigma2: Current scalar variance, or None to profile it.

    Returns:
        StructuredScaleFit with the matrix, rho and a boundary flag.
    """
    model = ScaleModel.parse(kind)
    s = np.asarray(getattr(s, "matrix", s), dtype=np.float64)
    m = s.shape[0]
    if model.kind == "identity" or m == 1:
        return StructuredScaleFit(np.eye(m), 0.0, False)
    if model.kind == "unstructured":
        raise ValueError("use adjust() for unstructured scales")

    lo, hi = model.rho_bounds(m)
    lo, hi = lo + RHO_MARGIN, hi - RHO_MARGIN
    res = minimize_scalar(
        lambda r: structured_objective(model.kind, s, df, sigma2, r),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": RHO_XTOL},
    )
    rho = float(res.x)
    boundary = (rho - lo) < 10 * RHO_XTOL or (hi - rho) < 10 * RHO_XTOL or not res.success
    if boundary:
        msg = f"{model.kind} correlation estimate {rho:.6g} sits at the edge of ({lo:.6g}, {hi:.6g})"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return StructuredScaleFit(model.matrix(m, rho), rho, boundary)


def sigma2_update(sigma_k, s, n, m) -> float:
    """sigma2 = tr(Sigma_k^-1 S_k) / (n m)."""
    s = np.asarray(getattr(s, "matrix", s), dtype=np.float64)
    return float(np.trace(np.linalg.solve(sigma_k, s))) / (n * m)


def profile_loglik(sigma2, scales, n, m) -> float:
    """-(nm/2)[1 + log(2 pi sigma2) + sum_k logdet(Sigma_k)/m_k]."""
    if sigma2 <= 0:
        raise DegenerateScaleError(f"profile log-likelihood undefined for sigma2 = {sigma2}")
    logdets = sum(spd_logdet(s, f"Sigma_{k + 1}") / s.shape[0] for k, s in enumerate(scales))
    return -0.5 * n * m * (1.0 + np.log(2 * np.pi * sigma2) + logdets)
