"""
Tensor-variate normal distribution
==================================

Y ~ TVN(M, sigma2 * Sigma_p kron ... kron Sigma_1): vec(Y) is multivariate
normal with a Kronecker-separable covariance. Nothing here ever forms the
full Kronecker matrix; every Sigma_k acts on its own mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from tensorreg.errors import DegenerateScaleError, TensorShapeError
from tensorreg.tensor_core import DenseTensor, kronecker_all, multi_mode_apply

logger = logging.getLogger(__name__)


def cholesky_factor(sigma, name="scale matrix"):
    try:
        return scipy.linalg.cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateScaleError(f"{name} is not positive definite") from exc


def spd_inverse(sigma, name="scale matrix") -> np.ndarray:
    c = cholesky_factor(sigma, name)
    inv = scipy.linalg.cho_solve(c, np.eye(sigma.shape[0]))
    return (inv + inv.T) / 2


def spd_logdet(sigma, name="scale matrix") -> float:
    c, _ = cholesky_factor(sigma, name)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def symmetric_sqrt(sigma, inverse=False) -> np.ndarray:
    """Eigen square root of a symmetric NND matrix (or of its inverse)."""
    w, v = np.linalg.eigh(sigma)
    w = np.clip(w, 0.0, None)
    if inverse:
        if np.any(w <= 0):
            raise DegenerateScaleError("cannot take the inverse square root of a singular matrix")
        w = 1.0 / w
    return (v * np.sqrt(w)) @ v.T


@dataclass(frozen=True, eq=False)
class TvnParams:
    mean: DenseTensor
    scales: tuple[np.ndarray, ...]
    sigma2: float
    normalized: bool = False

    def __post_init__(self):
        mean = self.mean if isinstance(self.mean, DenseTensor) else DenseTensor(self.mean)
        object.__setattr__(self, "mean", mean)
        scales = tuple(np.array(s, dtype=np.float64) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if len(scales) != mean.order:
            raise TensorShapeError(f"{len(scales)} scale matrices for a mean of order {mean.order}")
        for k, (s, m) in enumerate(zip(scales, mean.dims), start=1):
            if s.shape != (m, m):
                raise TensorShapeError(f"Sigma_{k} has shape {s.shape}, mode {k} has size {m}")
            if not np.allclose(s, s.T, rtol=1e-10, atol=1e-12):
                raise DegenerateScaleError(f"Sigma_{k} is not symmetric")
            cholesky_factor(s, f"Sigma_{k}")
            if self.normalized and abs(s[0, 0] - 1.0) > 1e-12:
                raise DegenerateScaleError(f"Sigma_{k}(1,1) = {s[0, 0]}, expected 1")
        if self.sigma2 < 0:
            raise DegenerateScaleError(f"sigma2 must be nonnegative, got {self.sigma2}")

    @property
    def dims(self):
        return self.mean.dims

    @property
    def size(self):
        return self.mean.size


def _centered(y, params) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.shape != params.dims:
        raise TensorShapeError(f"observation dims {arr.shape} differ from mean dims {params.dims}")
    return arr - params.mean.array


def _quadratic_form(z, scales) -> float:
    """<z, [[z; Sigma_1^-1, ..., Sigma_p^-1]]> without inverting anything explicitly."""
    w = z
    for k, s in enumerate(scales):
        c = cholesky_factor(s, f"Sigma_{k + 1}")
        moved = np.moveaxis(w, k, 0)
        solved = scipy.linalg.cho_solve(c, moved.reshape(moved.shape[0], -1))
        w = np.moveaxis(solved.reshape(moved.shape), 0, k)
    return float(np.vdot(z, w))


def mahalanobis(y, params: TvnParams) -> float:
    """Squared Mahalanobis distance of y from the mean."""
    if params.sigma2 <= 0:
        raise DegenerateScaleError("Mahalanobis distance undefined for sigma2 = 0")
    return _quadratic_form(_centered(y, params), params.scales) / params.sigma2


def log_density(y, params: TvnParams) -> float:
    if params.sigma2 <= 0:
        raise DegenerateScaleError("density undefined for sigma2 = 0")
    m = params.size
    logdet = sum(
        (m // s.shape[0]) * spd_logdet(s, f"Sigma_{k + 1}") for k, s in enumerate(params.scales)
    )
    d2 = mahalanobis(y, params)
    return -0.5 * (m * np.log(2 * np.pi * params.sigma2) + logdet + d2)


def sample_array(params: TvnParams, n: int, rng) -> np.ndarray:
    """n draws stacked along a new leading axis."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    z = rng.standard_normal((n,) + params.dims)
    roots = [symmetric_sqrt(s) for s in params.scales]
    draws = multi_mode_apply(z, roots, range(1, len(roots) + 1))
    return params.mean.array[None] + np.sqrt(params.sigma2) * draws


def sample(params: TvnParams, n: int, seed=None) -> list[DenseTensor]:
    """Draw n tensors M + sigma [[Z; Sigma_1^1/2, ..., Sigma_p^1/2]]."""
    if n < 0:
        raise ValueError("sample size must be nonnegative")
    return [DenseTensor(y) for y in sample_array(params, n, seed)]


def reshape_distribution_check(params: TvnParams, k: int):
    """(Sigma_k, Sigma_-k): the row and column covariances of the mode-k matricization.

    Sigma_-k = Sigma_p kron ... kron Sigma_1 with Sigma_k left out.
    """
    p = len(params.scales)
    if not 1 <= k <= p:
        raise TensorShapeError(f"mode index {k} out of range 1..{p}")
    rest = [params.scales[i] for i in reversed(range(p)) if i != k - 1]
    return params.scales[k - 1], kronecker_all(rest)
