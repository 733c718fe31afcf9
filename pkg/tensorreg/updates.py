"""
Block updates
=============

Closed-form block updates of the block-relaxation fit, one family per format.
Each update maximizes the profile log-likelihood over its own block with every
other block held fixed, and writes the result back into the FitState it was
given.

Stacks: X has shape (n, h_1..h_l), Y has shape (n, m_1..m_p). Mode indices
`k` are 1-based like the rest of the public API.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from tensorreg.config import FIT_DEFAULTS
from tensorreg.covariance import (
    ScaleModel,
    adjust,
    fit_structured_scale,
    mode_sse_array,
    sigma2_update,
    structured_objective,
)
from tensorreg.errors import SingularSystemError
from tensorreg.lowrank import (
    CpCoeff,
    OpCoeff,
    TrCoeff,
    TuckerCoeff,
    covariate_chain_tr,
    covariate_weights_cp,
    partial_predict,
)
from tensorreg.tensor_core import chain_cores, flatten_trailing, mode_apply, multi_mode_apply, unfold
from tensorreg.tvn import spd_inverse, symmetric_sqrt

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = np.finfo(float).tiny


@dataclass(eq=False)
class FitState:
    """Working parameters of one fit. Owned by a single fit, never shared."""

    X: np.ndarray
    Y: np.ndarray | None
    fmt: str
    scale_models: tuple[ScaleModel, ...]
    scales: list[np.ndarray]
    sigma2: float = 1.0
    core: np.ndarray | None = None
    # L_j (tucker, cp) or covariate cores (tr)
    covariate: list[np.ndarray] = field(default_factory=list)
    # M_k (tucker, cp, op) or response cores (tr)
    response: list[np.ndarray] = field(default_factory=list)
    rhos: list[float | None] = field(default_factory=list)
    allow_pinv: bool = False
    rank_tol: float = FIT_DEFAULTS["rank_tol"]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def l(self):
        return self.X.ndim - 1

    @property
    def p(self):
        return len(self.scales)

    @property
    def response_dims(self):
        return tuple(s.shape[0] for s in self.scales)

    @property
    def m(self):
        return int(np.prod(self.response_dims))

    def precisions(self):
        return [spd_inverse(s, f"Sigma_{k + 1}") for k, s in enumerate(self.scales)]

    def coeff(self):
        if self.fmt == "tucker":
            return TuckerCoeff(self.core, self.covariate, self.response)
        if self.fmt == "cp":
            return CpCoeff(None, self.covariate, self.response)
        if self.fmt == "op":
            return OpCoeff(self.response)
        return TrCoeff(self.covariate, self.response)

    def residuals(self):
        return self.Y - partial_predict(self.coeff(), self.X)


# ==============================================================================
# SHARED PIECES
# ==============================================================================

def _solve_normal(c, rhs, block, state):
    """Solve c x = rhs for a symmetric normal-equation matrix c."""
    c = (c + c.T) / 2
    try:
        factor = scipy.linalg.cho_factor(c, lower=True)
        diag = np.abs(np.diag(factor[0]))
        if diag.min() <= state.rank_tol * diag.max():
            raise np.linalg.LinAlgError("numerically singular")
        return scipy.linalg.cho_solve(factor, rhs)
    except np.linalg.LinAlgError:
        if not state.allow_pinv:
            raise SingularSystemError(block, "normal-equation matrix is not positive definite") from None
    msg = f"block {block}: singular normal equations, using the pseudo-inverse (estimate not unique)"
    logger.warning(msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return np.linalg.pinv(c, rcond=state.rank_tol, hermitian=True) @ rhs


def _pivoted_qr(mat, tol):
    q, r, piv = scipy.linalg.qr(mat, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * d[0])) if d.size and d[0] > 0 else 0
    return q, r, piv, rank


def _weighted(arr, precisions, skip=None, offset=1):
    mats = [None if q == skip else prec for q, prec in enumerate(precisions)]
    return multi_mode_apply(arr, mats, range(offset, offset + len(mats)))


def _mvmlr(state, G, j, precisions, block):
    """Response-factor update M_j = [sum_i Y_i(j) S_-j^-1 G_ij'] [sum_i G_ij S_-j^-1 G_ij']^-1.

    `G` is the stack (n, m_1.., r at axis j+1, .., m_p) with <X_i|B> = G_i x_j M_j.
    """
    p = state.p
    gw = _weighted(G, precisions, skip=j)
    axes = [0] + [q + 1 for q in range(p) if q != j]
    a = np.tensordot(state.Y, gw, axes=(axes, axes))
    c = np.tensordot(G, gw, axes=(axes, axes))
    return _solve_normal(c, a.T, block, state).T


def _gls_vector(state, phi, precisions, block):
    """theta solving sum_i Phi_i S^-1 Phi_i' theta = sum_i Phi_i S^-1 vec Y_i; Phi is (n, P, m...)."""
    p = state.p
    phiw = _weighted(phi, precisions, offset=2)
    axes = [0] + list(range(2, p + 2))
    c = np.tensordot(phi, phiw, axes=(axes, axes))
    rhs = np.tensordot(phiw, state.Y, axes=(axes, [0] + list(range(1, p + 1))))
    return _solve_normal(c, rhs, block, state)


def update_scale(k, state, resid=None):
    """Refit Sigma_k from the current residuals and fold the scale into sigma2.

    Sigma_k and sigma2 are maximized jointly, so the profile log-likelihood
    cannot decrease.
    """
    j = k - 1
    resid = state.residuals() if resid is None else resid
    s = mode_sse_array(resid, state.precisions(), j)
    m_j = state.scales[j].shape[0]
    df = state.n * state.m // m_j
    model = state.scale_models[j]

    if model.kind == "identity":
        sigma = np.eye(m_j)
    elif model.kind == "unstructured":
        sigma = adjust(df, state.sigma2 if state.sigma2 > 0 else 1.0, s)
    else:
        fitted = fit_structured_scale(model, s, df, None)
        sigma, rho = fitted.matrix, fitted.rho
        old = state.rhos[j]
        if old is not None and structured_objective(model.kind, s, df, None, old) < \
                structured_objective(model.kind, s, df, None, rho):
            sigma, rho = model.matrix(m_j, old), old
        state.rhos[j] = rho

    state.scales[j] = sigma
    state.sigma2 = max(sigma2_update(sigma, s, state.n, state.m), SIGMA2_FLOOR)
    return sigma


def _push_scale(state, scale):
    """Move a positive scalar (or per-column scales) into the last response block."""
    last = state.response[-1]
    if state.fmt == "cp":
        state.response[-1] = last * scale[None, :]
    else:
        state.response[-1] = last * scale


def _normalize_columns(state, mat):
    norms = np.linalg.norm(mat, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    _push_scale(state, safe)
    return mat / safe


def _normalize_frobenius(state, arr):
    nrm = np.linalg.norm(arr)
    if nrm == 0:
        return arr
    _push_scale(state, nrm)
    return arr / nrm


# ==============================================================================
# TUCKER
# ==============================================================================

def _tucker_projected_covariates(state, skip=None):
    """[[X_i; L_1', ..., L_l']] with covariate mode `skip` (0-based) left open."""
    mats = [None if j == skip else L.T for j, L in enumerate(state.covariate)]
    return multi_mode_apply(state.X, mats, range(1, state.l + 1))


def _project_responses(state, precisions, skip=None):
    """[[Y_i; M_1' Sigma_1^-1, ..., M_p' Sigma_p^-1]] with response mode `skip` left open."""
    mats = [None if k == skip else M.T @ prec for k, (M, prec) in enumerate(zip(state.response, precisions))]
    return multi_mode_apply(state.Y, mats, range(1, state.p + 1))


def tucker_reorthonormalize(state):
    """Re-establish M_k' Sigma_k^-1 M_k = I without changing B (R factors go into the core)."""
    for k, (M, sigma) in enumerate(zip(state.response, state.scales)):
        q, r = np.linalg.qr(symmetric_sqrt(sigma, inverse=True) @ M)
        state.response[k] = symmetric_sqrt(sigma) @ q
        state.core = mode_apply(state.core, r, state.l + k)


def tucker_update_M(k, state):
    """M_k = Sigma_k^1/2 U, U the leading d_k left singular vectors of Sigma_k^-1/2 Q_k."""
    j = k - 1
    precisions = state.precisions()
    w = flatten_trailing(_tucker_projected_covariates(state), 1)
    basis, _, _, rank = _pivoted_qr(w, state.rank_tol)
    basis = basis[:, :rank]

    projected = _project_responses(state, precisions, skip=j)
    q_k = unfold(np.tensordot(basis, projected, axes=([0], [0])), 1 + j)

    sigma = state.scales[j]
    a = symmetric_sqrt(sigma, inverse=True) @ q_k
    evals, evecs = np.linalg.eigh(a @ a.T)
    order = np.argsort(evals)[::-1]
    d = state.response[j].shape[1]
    lead = evals[order[:d]]
    if lead[-1] <= state.rank_tol * max(lead[0], np.finfo(float).tiny):
        msg = f"block M_{k}: Q_{k} has rank below {d}; trailing directions are arbitrary"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    M = symmetric_sqrt(sigma) @ evecs[:, order[:d]]
    state.response[j] = M
    return M


def tucker_update_V(state):
    """Core update V_<l> = W^-' Y' (kron Sigma_k^-1 M_k)."""
    precisions = state.precisions()
    w = flatten_trailing(_tucker_projected_covariates(state), 1)
    yt = flatten_trailing(_project_responses(state, precisions), 1)
    q, r, piv, rank = _pivoted_qr(w, state.rank_tol)
    cols = w.shape[1]
    if rank < cols:
        if not state.allow_pinv:
            raise SingularSystemError("V", f"covariate design W has rank {rank} < {cols}")
        msg = f"block V: covariate design W has rank {rank} < {cols}, using the pseudo-inverse"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        v = np.linalg.pinv(w, rcond=state.rank_tol) @ yt
    else:
        v = np.empty((cols, yt.shape[1]))
        v[piv] = scipy.linalg.solve_triangular(r, q.T @ yt)
    c_dims = tuple(L.shape[1] for L in state.covariate)
    d_dims = tuple(M.shape[1] for M in state.response)
    state.core = v.reshape(c_dims + d_dims, order="F")
    return state.core


def tucker_update_L(k, state):
    """GLS update of L_k, solved in core space through the M-orthogonality constraint."""
    j = k - 1
    l, p = state.l, state.p
    precisions = state.precisions()
    a = _tucker_projected_covariates(state, skip=j)
    other = [q for q in range(l) if q != j]
    # (n, h_k, c_k, d_1..d_p)
    g = np.tensordot(a, state.core, axes=([q + 1 for q in other], other))
    yt = _project_responses(state, precisions)
    daxes = list(range(3, 3 + p))
    c4 = np.tensordot(g, g, axes=([0] + daxes, [0] + daxes))
    rhs2 = np.tensordot(g, yt, axes=([0] + daxes, [0] + list(range(1, p + 1))))
    h, c = rhs2.shape
    sol = _solve_normal(c4.reshape((h * c, h * c), order="F"), rhs2.reshape(h * c, order="F"), f"L_{k}", state)
    L = sol.reshape((h, c), order="F")
    qmat, rmat = np.linalg.qr(L)
    state.covariate[j] = qmat
    state.core = mode_apply(state.core, rmat, j)
    return qmat


# ==============================================================================
# CP
# ==============================================================================

def _cp_gram(state, precisions, skip=None):
    gram = np.ones((state.response[0].shape[1],) * 2)
    for q, (M, prec) in enumerate(zip(state.response, precisions)):
        if q != skip:
            gram = gram * (M.T @ prec @ M)
    return gram


def cp_update_L(k, state):
    """vec(L_k) from the Hadamard-structured normal equations."""
    j = k - 1
    p = state.p
    precisions = state.precisions()
    ws = covariate_weights_cp(state.coeff(), state.X, skip=j)    # (n, h_k, r)
    r = ws.shape[2]
    operands = [state.Y, list(range(p + 1))]
    for q, (M, prec) in enumerate(zip(state.response, precisions)):
        operands += [prec @ M, [q + 1, p + 1]]
    ys = np.einsum(*operands, [0, p + 1], optimize=True)           # (n, r)

    h2 = np.einsum("isa,itb->satb", ws, ws) * _cp_gram(state, precisions)[None, :, None, :]
    rhs2 = np.einsum("isa,ia->sa", ws, ys)
    h = ws.shape[1]
    sol = _solve_normal(h2.reshape((h * r, h * r), order="F"), rhs2.reshape(h * r, order="F"), f"L_{k}", state)
    L = _normalize_columns(state, sol.reshape((h, r), order="F"))
    state.covariate[j] = L
    return L


def _cp_response_design(state, j):
    """G stack for M_j: G_i[.., rho at j, ..] = w_i,rho prod_{q != j} M_q[i_q, rho]."""
    p = state.p
    w = covariate_weights_cp(state.coeff(), state.X)
    rl = p + 1
    operands = [w, [0, rl]]
    for q, M in enumerate(state.response):
        if q != j:
            operands += [M, [q + 1, rl]]
    out = [0] + [rl if q == j else q + 1 for q in range(p)]
    return np.einsum(*operands, out, optimize=True), w


def cp_update_M(k, state):
    """M_k from the Khatri-Rao/Hadamard normal equations, then Sigma_k."""
    j = k - 1
    p = state.p
    precisions = state.precisions()
    w = covariate_weights_cp(state.coeff(), state.X)
    rl = p + 1
    operands = [state.Y, list(range(p + 1)), w, [0, rl]]
    for q, (M, prec) in enumerate(zip(state.response, precisions)):
        if q != j:
            operands += [prec @ M, [q + 1, rl]]
    a = np.einsum(*operands, [j + 1, rl], optimize=True)             # (m_k, r)
    c = (w.T @ w) * _cp_gram(state, precisions, skip=j)
    state.response[j] = _solve_normal(c, a.T, f"M_{k}", state).T

    sigma = update_scale(k, state)
    if j < p - 1:
        state.response[j] = _normalize_columns(state, state.response[j])
    return state.response[j], sigma


# ==============================================================================
# OP
# ==============================================================================

def _op_response_design(state, j):
    mats = [None if q == j else M for q, M in enumerate(state.response)]
    return multi_mode_apply(state.X, mats, range(1, state.p + 1))


def op_update(k, state):
    """M_k with G_ik = X_i(k) (kron_{j != k} M_j'), then Sigma_k."""
    j = k - 1
    g = _op_response_design(state, j)
    state.response[j] = _mvmlr(state, g, j, state.precisions(), f"M_{k}")
    sigma = update_scale(k, state)
    if j < state.p - 1:
        state.response[j] = _normalize_frobenius(state, state.response[j])
    return state.response[j], sigma


# ==============================================================================
# TENSOR RING
# ==============================================================================

def _eye_or_chain(cores, bond):
    return chain_cores(cores) if cores else np.eye(bond)


def _tr_response_design(state, j):
    """G stack (n, m_1.., g_{k-1} g_k at j, .., m_p) for response core j (0-based)."""
    p = state.p
    cores = state.response
    ga, _, gb = cores[j].shape
    lam = covariate_chain_tr(state.coeff(), state.X)               # (n, g_p, g_0)
    A, B, C, E = p + 1, p + 2, p + 3, p + 4
    right = _eye_or_chain(cores[j + 1:], gb)
    left = _eye_or_chain(cores[:j], ga)
    right_labels = [B] + [q + 1 for q in range(j + 1, p)] + [C]
    left_labels = [E] + [q + 1 for q in range(j)] + [A]
    out = [0] + [q + 1 for q in range(j)] + [B, A] + [q + 1 for q in range(j + 1, p)]
    t = np.einsum(right, right_labels, lam, [0, C, E], left, left_labels, out, optimize=True)
    shape = (state.n,) + state.response_dims[:j] + (ga * gb,) + state.response_dims[j + 1:]
    return t.reshape(shape)


def _tr_covariate_design(state, j):
    """Phi stack (n, h_k g_{k-1} g_k, m_1..m_p) for covariate core j, ordered as vec(core_(2))."""
    l, p = state.l, state.p
    cores = state.covariate
    ga, h, gb = cores[j].shape
    A, B, C, E = l + p + 1, l + p + 2, l + p + 3, l + p + 4
    resp_labels = [l + 1 + q for q in range(p)]
    right = _eye_or_chain(cores[j + 1:], gb)
    left = _eye_or_chain(cores[:j], ga)
    mchain = chain_cores(state.response)
    phi = np.einsum(
        state.X, [0] + [q + 1 for q in range(l)],
        right, [B] + [q + 1 for q in range(j + 1, l)] + [C],
        mchain, [C] + resp_labels + [E],
        left, [E] + [q + 1 for q in range(j)] + [A],
        [0, B, A, j + 1] + resp_labels,
        optimize=True,
    )
    return phi.reshape((state.n, gb * ga * h) + state.response_dims)


def _core_from_mode2(mat, ga, gb):
    """Inverse of core_(2): (d, ga gb) -> (ga, d, gb)."""
    return mat.reshape((mat.shape[0], ga, gb), order="F").transpose(1, 0, 2)


def tr_update(k, state, chain="response"):
    """Update one ring core by generalized least squares.

    Args:
        k: 1-based position within its chain.
        state: FitState of a TR fit.
        chain: "covariate" or "response".

    Returns:
        The updated core (scaled to unit norm unless it is the last response core).
    """
    j = k - 1
    precisions = state.precisions()
    if chain == "covariate":
        ga, h, gb = state.covariate[j].shape
        sol = _gls_vector(state, _tr_covariate_design(state, j), precisions, f"L_{k}")
        core = _core_from_mode2(sol.reshape((h, ga * gb), order="F"), ga, gb)
        state.covariate[j] = _normalize_frobenius(state, core)
        return state.covariate[j]
    if chain != "response":
        raise ValueError(f"unknown TR chain '{chain}'")
    ga, _, gb = state.response[j].shape
    m2 = _mvmlr(state, _tr_response_design(state, j), j, precisions, f"M_{k}")
    core = _core_from_mode2(m2, ga, gb)
    if j < state.p - 1:
        core = _normalize_frobenius(state, core)
    state.response[j] = core
    return core


# ==============================================================================
# BLOCK DESIGNS (used by inference)
# ==============================================================================

def expand_response_design(g, j, m_j):
    """Phi_i[(s, c), i_1..i_p] = delta(s, i_j) G_i[.., c at j, ..], (s, c) flattened s-fastest."""
    p = g.ndim - 1
    S, Cl, J = p + 1, p + 2, p + 3
    g_labels = [0] + [Cl if q == j else q + 1 for q in range(p)]
    out = [0, Cl, S] + [J if q == j else q + 1 for q in range(p)]
    phi = np.einsum(g, g_labels, np.eye(m_j), [S, J], out)
    shape = phi.shape
    return phi.reshape((shape[0], shape[1] * shape[2]) + shape[3:])


def block_designs(state):
    """[(name, Phi)] with vec <X_i|B> linear in each block: Phi_i' theta_block.

    Block order and coordinates: CP covariate factors vec(L_k) then response
    factors vec(M_k) (lambda folded into M_p); OP vec(M_k); TR vec(core_(2))
    for covariate cores then response cores.
    """
    out = []
    p = state.p
    if state.fmt == "cp":
        coeff = state.coeff()
        for j in range(state.l):
            ws = covariate_weights_cp(coeff, state.X, skip=j)
            rl, sl = p + 1, p + 2
            operands = [ws, [0, sl, rl]]
            for q, M in enumerate(state.response):
                operands += [M, [q + 1, rl]]
            phi = np.einsum(*operands, [0, rl, sl] + list(range(1, p + 1)), optimize=True)
            shape = phi.shape
            out.append((f"L_{j + 1}", phi.reshape((shape[0], shape[1] * shape[2]) + shape[3:])))
        for j in range(p):
            g, _ = _cp_response_design(state, j)
            out.append((f"M_{j + 1}", expand_response_design(g, j, state.response_dims[j])))
    elif state.fmt == "op":
        for j in range(p):
            g = _op_response_design(state, j)
            out.append((f"M_{j + 1}", expand_response_design(g, j, state.response_dims[j])))
    elif state.fmt == "tr":
        for j in range(state.l):
            out.append((f"L_{j + 1}", _tr_covariate_design(state, j)))
        for j in range(p):
            g = _tr_response_design(state, j)
            out.append((f"M_{j + 1}", expand_response_design(g, j, state.response_dims[j])))
    else:
        raise ValueError(f"no block designs for format '{state.fmt}'")
    return out
