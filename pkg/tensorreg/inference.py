"""
Asymptotic inference
====================

Plug-in large-sample laws of vec(B_hat):

- tucker: Kronecker form sigma2 (M M') x (P_L (XX')^-1 P_L); with a balanced
  design (XX' = q I) every mode gets its own block and the law is TVN
- cp / op / tr: explicit covariance J Cov(theta) J', theta the stacked factor
  blocks in fitting order, Cov(theta) = sigma2 D^-1 F D^-1 with F the full
  information and D its block diagonal (one block per closed-form update)

Kronecker laws can be pushed through per-mode contrasts and marginally
standardized. When (mh)^2 exceeds the covariance budget only marginal
variances are kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from tensorreg.config import BUDGETS
from tensorreg.errors import BudgetExceededError, DegenerateScaleError, SingularSystemError, TensorShapeError
from tensorreg.estimation import as_stack, state_from_fit
from tensorreg.lowrank import CpCoeff, OpCoeff, TrCoeff, TuckerCoeff, to_full
from tensorreg.tensor_core import (
    DenseTensor,
    chain_cores,
    duplication_matrix,
    flatten_trailing,
    khatri_rao_all,
    kronecker_all,
    matricization_permutation,
    multi_mode_apply,
    outer_product,
    vec,
)
from tensorreg.tvn import spd_inverse
from tensorreg.updates import block_designs

logger = logging.getLogger(__name__)

STRUCTURES = ("kronecker", "explicit", "marginal")


@dataclass(frozen=True, eq=False)
class AsymptoticLaw:
    """Normal law of vec(B_hat) around `mean`.

    Kronecker structure: Cov = scale * blocks[-1] x ... x blocks[0], where
    block g acts on the (1-based, contiguous) modes in block_modes[g].
    """

    mean: DenseTensor
    structure: str
    scale: float = 1.0
    blocks: tuple[np.ndarray, ...] = ()
    block_modes: tuple[tuple[int, ...], ...] = ()
    covariance: np.ndarray | None = None
    variances: DenseTensor | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown law structure '{self.structure}'")
        if self.structure == "kronecker" and self.variances is None:
            object.__setattr__(self, "variances", _kronecker_variances(self))

    @property
    def dims(self):
        return self.mean.dims

    def explicit(self, budget=None) -> np.ndarray:
        """Full covariance of vec(B_hat)."""
        if self.covariance is not None:
            return self.covariance
        if self.structure != "kronecker":
            raise ValueError("law only carries marginal variances")
        budget = BUDGETS["covariance_entries"] if budget is None else budget
        size = self.mean.size
        if size * size > budget:
            raise BudgetExceededError(f"covariance of side {size} exceeds budget {budget}")
        return self.scale * kronecker_all(list(reversed(self.blocks)))


@dataclass(frozen=True, eq=False)
class JacobianBlocks:
    names: tuple[str, ...]
    blocks: tuple[np.ndarray, ...]

    @property
    def matrix(self):
        return np.hstack(self.blocks)


def _kronecker_variances(law):
    diag_parts = []
    for block, modes in zip(law.blocks, law.block_modes):
        dims = tuple(law.mean.dims[k - 1] for k in modes)
        diag_parts.append(np.diag(block).reshape(dims, order="F"))
    if not diag_parts:
        return DenseTensor(np.asarray(law.scale))
    operands, labels = [], 0
    for part in diag_parts:
        operands += [part, list(range(labels, labels + part.ndim))]
        labels += part.ndim
    return DenseTensor(law.scale * np.einsum(*operands, list(range(labels))))


# ==============================================================================
# DESIGN PREPARATION
# ==============================================================================

def centered_model_adjustment(X, fit=None, intercept=None) -> np.ndarray:
    """Covariate stack, centered when the fit profiled an intercept."""
    xs = as_stack(X, "covariates")
    if intercept is None:
        intercept = True if fit is None or fit.spec is None else fit.spec.intercept
    return xs - xs.mean(axis=0) if intercept else xs


def _projection(a):
    """a (a'a)^-1 a'."""
    q, _ = np.linalg.qr(a)
    return q @ q.T


# ==============================================================================
# TUCKER
# ==============================================================================

def tucker_asymptotic_cov(fit, X) -> AsymptoticLaw:
    """sigma2 (M M') x (P_L (XX')^-1 P_L), or the per-mode TVN form when XX' = qI."""
    coeff = fit.coeff
    if not isinstance(coeff, TuckerCoeff):
        raise TypeError("tucker_asymptotic_cov needs a Tucker fit")
    xs = centered_model_adjustment(X, fit)
    l = len(coeff.covariate_factors)
    xmat = flatten_trailing(xs, 1)
    xx = xmat.T @ xmat
    projections = [_projection(L) for L in coeff.covariate_factors]
    response_blocks = [M @ M.T for M in coeff.response_factors]
    response_modes = [(l + k + 1,) for k in range(len(response_blocks))]
    mean = to_full(coeff)

    q = xx[0, 0]
    if q > 0 and np.allclose(xx, q * np.eye(xx.shape[0]), rtol=0, atol=1e-10 * q):
        logger.debug("balanced design, XX' = %g I", q)
        return AsymptoticLaw(
            mean=mean,
            structure="kronecker",
            scale=fit.sigma2 / q,
            blocks=tuple(projections + response_blocks),
            block_modes=tuple([(j + 1,) for j in range(l)] + response_modes),
        )

    try:
        xx_inv = spd_inverse(xx, "XX'")
    except DegenerateScaleError as exc:
        raise SingularSystemError("XX'", "covariate cross-product is singular") from exc
    p_l = kronecker_all(list(reversed(projections)))
    return AsymptoticLaw(
        mean=mean,
        structure="kronecker",
        scale=fit.sigma2,
        blocks=tuple([p_l @ xx_inv @ p_l] + response_blocks),
        block_modes=tuple([tuple(range(1, l + 1))] + response_modes),
    )


# ==============================================================================
# JACOBIANS
# ==============================================================================

def _place(dims, rows, cols, mat):
    """Rows of `mat` indexed by vec(B_(rows x cols)) moved back into vec(B) order."""
    perm = matricization_permutation(dims, rows, cols)
    out = np.empty_like(mat)
    out[perm] = mat
    return out


def jacobian_blocks(coeff) -> JacobianBlocks:
    """d vec(B) / d theta per factor block.

    Coordinates are vec(L_k), vec(M_k) for CP (weights folded into M_p),
    vec(M_k) for OP and vec(core_(2)) for TR cores, in ring order.
    """
    dims = tuple(coeff.covariate_dims) + tuple(coeff.response_dims)
    modes = list(range(1, len(dims) + 1))

    if isinstance(coeff, CpCoeff):
        factors = list(coeff.covariate_factors) + list(coeff.response_factors)
        factors[-1] = factors[-1] * coeff.weights[None, :]
        l = len(coeff.covariate_factors)
        names, blocks = [], []
        for k, a in enumerate(factors):
            rest = [q for q in range(len(factors)) if q != k]
            t = khatri_rao_all([factors[q] for q in reversed(rest)])
            jk = np.kron(t, np.eye(a.shape[0]))
            blocks.append(_place(dims, [k + 1], [q + 1 for q in rest], jk))
            names.append(f"L_{k + 1}" if k < l else f"M_{k - l + 1}")
        return JacobianBlocks(tuple(names), tuple(blocks))

    if isinstance(coeff, OpCoeff):
        p = len(coeff.factors)
        blocks = []
        for k, a in enumerate(coeff.factors):
            others = [coeff.factors[q] for q in range(p) if q != k]
            r = vec(outer_product(*others)) if others else np.ones(1)
            jk = np.kron(r[:, None], np.eye(a.size))
            rows = [p + k + 1, k + 1]
            cols = [q for q in modes if q not in rows]
            blocks.append(_place(dims, rows, cols, jk))
        return JacobianBlocks(tuple(f"M_{k + 1}" for k in range(p)), tuple(blocks))

    if isinstance(coeff, TrCoeff):
        cores = coeff.cores
        ncore = len(cores)
        l = len(coeff.covariate_cores)
        names, blocks = [], []
        for k, core in enumerate(cores):
            ga, d, gb = core.shape
            # (gb, after..., before..., ga)
            chain = chain_cores(list(cores[k + 1:]) + list(cores[:k]))
            n_after = ncore - k - 1
            after_axes = list(range(1, 1 + n_after))
            before_axes = list(range(1 + n_after, ncore))
            t = np.transpose(chain, [ncore, 0] + before_axes + after_axes)
            t = t.reshape((ga * gb, -1), order="F")
            jk = np.kron(t.T, np.eye(d))
            rest = [q for q in modes if q != k + 1]
            blocks.append(_place(dims, [k + 1], rest, jk))
            names.append(f"L_{k + 1}" if k < l else f"M_{k - l + 1}")
        return JacobianBlocks(tuple(names), tuple(blocks))

    raise TypeError(f"no factor Jacobian for {type(coeff).__name__}")


# ==============================================================================
# CP / OP / TR
# ==============================================================================

def _block_inverse(info, sizes, names):
    dinv = np.zeros_like(info)
    start = 0
    for size, name in zip(sizes, names):
        sl = slice(start, start + size)
        try:
            dinv[sl, sl] = spd_inverse(info[sl, sl], name)
        except DegenerateScaleError as exc:
            raise SingularSystemError(name, "block information is singular") from exc
        start += size
    return dinv


def _factor_law(fit, X, scales=None, budget=None) -> AsymptoticLaw:
    budget = BUDGETS["covariance_entries"] if budget is None else budget
    state = state_from_fit(fit, X)
    if scales is not None:
        state.scales = [np.asarray(s, dtype=np.float64) for s in scales]
    designs = block_designs(state)
    names = [name for name, _ in designs]
    sizes = [phi.shape[1] for _, phi in designs]
    phi = np.concatenate([d for _, d in designs], axis=1)
    p = state.p
    phiw = multi_mode_apply(phi, state.precisions(), range(2, 2 + p))
    axes = [0] + list(range(2, 2 + p))
    info = np.tensordot(phi, phiw, axes=(axes, axes))
    info = (info + info.T) / 2
    dinv = _block_inverse(info, sizes, names)
    cov_theta = fit.sigma2 * dinv @ info @ dinv
    cov_theta = (cov_theta + cov_theta.T) / 2

    jac = jacobian_blocks(fit.coeff).matrix
    mean = to_full(fit.coeff)
    size = mean.size
    if size * size <= budget:
        cov = jac @ cov_theta @ jac.T
        cov = (cov + cov.T) / 2
        variances = DenseTensor(np.diag(cov).copy(), mean.dims)
        return AsymptoticLaw(mean=mean, structure="explicit", covariance=cov, variances=variances)
    logger.info("covariance of side %d over budget, keeping marginal variances only", size)
    var = np.einsum("ij,jk,ik->i", jac, cov_theta, jac)
    return AsymptoticLaw(mean=mean, structure="marginal", variances=DenseTensor(var, mean.dims))


def cp_asymptotic_cov(fit, X, scales=None) -> AsymptoticLaw:
    """J_CP Cov(theta) J_CP' for a CP fit; `scales` default to the fitted ones."""
    if not isinstance(fit.coeff, CpCoeff):
        raise TypeError("cp_asymptotic_cov needs a CP fit")
    return _factor_law(fit, X, scales)


def tr_op_asymptotic_cov(fit, X, scales=None) -> AsymptoticLaw:
    if not isinstance(fit.coeff, (TrCoeff, OpCoeff)):
        raise TypeError("tr_op_asymptotic_cov needs a TR or OP fit")
    return _factor_law(fit, X, scales)


def asymptotic_law(fit, X) -> AsymptoticLaw:
    if isinstance(fit.coeff, TuckerCoeff):
        return tucker_asymptotic_cov(fit, X)
    return _factor_law(fit, X)


# ==============================================================================
# CONTRASTS AND STANDARDIZATION
# ==============================================================================

def contrast_transform(law: AsymptoticLaw, contrasts) -> AsymptoticLaw:
    """Push a Kronecker law through per-mode contrasts.

    Args:
        law: Kronecker-structured law.
        contrasts: One entry per mode: None (identity), a vector (collapses
            the mode) or a matrix (r x d, transforms the mode).

    Returns:
        Law of B_hat x_1 C_1 ... x_N C_N; 1 x 1 blocks fold into the scale.
    """
    if law.structure != "kronecker":
        raise ValueError("contrast_transform needs a Kronecker-structured law")
    dims = law.mean.dims
    if len(contrasts) != len(dims):
        raise TensorShapeError(f"{len(contrasts)} contrasts for a law of order {len(dims)}")

    mats, collapse = [], []
    for k, (c, d) in enumerate(zip(contrasts, dims), start=1):
        if c is None:
            mats.append(np.eye(d))
            collapse.append(False)
            continue
        c = np.asarray(c, dtype=np.float64)
        collapse.append(c.ndim == 1)
        c = np.atleast_2d(c)
        if c.shape[1] != d:
            raise TensorShapeError(f"contrast for mode {k} has {c.shape[1]} columns, mode size is {d}")
        mats.append(c)

    mean = multi_mode_apply(law.mean.array, mats, range(len(dims)))
    keep = [k for k in range(len(dims)) if not collapse[k]]
    mean = mean.reshape(tuple(mean.shape[k] for k in keep), order="F")
    renumber = {k + 1: i + 1 for i, k in enumerate(keep)}

    scale = law.scale
    blocks, block_modes = [], []
    for block, modes in zip(law.blocks, law.block_modes):
        cg = kronecker_all([mats[k - 1] for k in reversed(modes)])
        new = cg @ block @ cg.T
        new = (new + new.T) / 2
        kept = tuple(renumber[k] for k in modes if k - 1 in keep)
        if not kept:
            scale *= float(new[0, 0])
            continue
        blocks.append(new)
        block_modes.append(kept)
    return AsymptoticLaw(
        mean=DenseTensor(mean),
        structure="kronecker",
        scale=scale,
        blocks=tuple(blocks),
        block_modes=tuple(block_modes),
    )


def standardize(estimate, law: AsymptoticLaw) -> DenseTensor:
    """Entrywise estimate / sd, i.e. [[est; d2(block_1), ...]] / sqrt(scale)."""
    est = np.asarray(estimate, dtype=np.float64)
    var = law.variances.array
    if est.shape != var.shape:
        raise TensorShapeError(f"estimate dims {est.shape} differ from law dims {var.shape}")
    if np.any(var <= 0):
        raise DegenerateScaleError("law has a zero marginal variance; cannot standardize")
    return DenseTensor(est / np.sqrt(var))


def marginal_pvalues(z) -> list[tuple[tuple[int, ...], float, float]]:
    """(1-based index, z, two-sided p) for every entry, first mode fastest."""
    arr = np.asarray(z, dtype=np.float64)
    flat = arr.ravel(order="F")
    pvals = 2.0 * norm.sf(np.abs(flat))
    index = np.unravel_index(np.arange(flat.size), arr.shape, order="F")
    return [
        (tuple(int(ix[i]) + 1 for ix in index), float(flat[i]), float(pvals[i]))
        for i in range(flat.size)
    ]


# ==============================================================================
# FISHER INFORMATION OF THE SCALES
# ==============================================================================

def fisher_info_scale(scales, n) -> np.ndarray:
    """Information of (vech Sigma_1, ..., vech Sigma_p) with sigma2 fixed.

    Diagonal blocks (n m_-k / 2) D'(Sigma_k^-1 x Sigma_k^-1) D, off-diagonal
    blocks (n m_-kl / 2) D' vec(Sigma_k^-1) vec(Sigma_l^-1)' D.
    """
    scales = [np.asarray(s, dtype=np.float64) for s in scales]
    if len(scales) < 2:
        raise TensorShapeError("Fisher information of the scales needs p >= 2")
    dims = [s.shape[0] for s in scales]
    m = int(np.prod(dims))
    precisions = [spd_inverse(s, f"Sigma_{k + 1}") for k, s in enumerate(scales)]
    dups = [duplication_matrix(d) for d in dims]
    sizes = [d * (d + 1) // 2 for d in dims]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    info = np.zeros((offsets[-1], offsets[-1]))
    for k, (pk, dk) in enumerate(zip(precisions, dups)):
        rk = slice(offsets[k], offsets[k + 1])
        info[rk, rk] = (n * m / dims[k] / 2) * dk.T @ np.kron(pk, pk) @ dk
        for j in range(k + 1, len(scales)):
            rj = slice(offsets[j], offsets[j + 1])
            off = (n * m / (dims[k] * dims[j]) / 2) * np.outer(dk.T @ vec(pk), dups[j].T @ vec(precisions[j]))
            info[rk, rj] = off
            info[rj, rk] = off.T
    return info


def is_singular(info, tol=1e-10) -> bool:
    w = np.linalg.eigvalsh((info + info.T) / 2)
    return bool(w[0] < tol * max(abs(w[-1]), np.finfo(float).tiny))


def schur_kernel_residual(scales, n) -> float:
    """Relative residual |S u| / (|S| |u|) of u = A^-1 D' vec(Sigma_1^-1) for p = 2.

    A is the Sigma_1 block and S = A - B C^-1 B' its Schur complement.
    """
    if len(scales) != 2:
        raise TensorShapeError("the Schur-complement kernel check is defined for p = 2")
    info = fisher_info_scale(scales, n)
    d1 = np.asarray(scales[0]).shape[0]
    k1 = d1 * (d1 + 1) // 2
    a, b, c = info[:k1, :k1], info[:k1, k1:], info[k1:, k1:]
    schur = a - b @ scipy.linalg.solve(c, b.T, assume_a="pos")
    u = scipy.linalg.solve(a, duplication_matrix(d1).T @ vec(spd_inverse(np.asarray(scales[0]))), assume_a="pos")
    return float(np.linalg.norm(schur @ u) / (np.linalg.norm(schur) * np.linalg.norm(u)))
