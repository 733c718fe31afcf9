"""
Low-rank coefficient formats
============================

The coefficient tensor B of a tensor-on-tensor regression has dims
(h_1..h_l, m_1..m_p): covariate modes first, response modes after. It is
stored in one of four formats:

- tucker: core V (c_1..c_l, d_1..d_p), covariate factors L_j (h_j x c_j),
  response factors M_k (m_k x d_k)
- cp: weights lambda (r,), L_j (h_j x r), M_k (m_k x r)
- op: M_q (m_q x h_q), one per mode pair (l = p)
- tr: ring of order-3 cores, covariate cores (s_{j-1} x h_j x s_j) followed
  by response cores (g_{k-1} x m_k x g_k), closing bonds g_0 = s_l, s_0 = g_p

Every format can contract a stack of covariates against itself without
materializing B (`partial_predict`), which is what estimation uses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Union

import numpy as np

from tensorreg.errors import RankError, TensorFileError, TensorShapeError
from tensorreg.tensor_core import DenseTensor, chain_cores, multi_mode_apply, outer_product
from tensorreg.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

FORMATS = ("tucker", "cp", "op", "tr")


def _mats(seq) -> tuple[np.ndarray, ...]:
    return tuple(np.array(m, dtype=np.float64) for m in seq)


@dataclass(frozen=True, eq=False)
class TuckerCoeff:
    core: np.ndarray
    covariate_factors: tuple[np.ndarray, ...]
    response_factors: tuple[np.ndarray, ...]
    # set by estimation once M_k' Sigma_k^-1 M_k = I holds
    orthogonal: bool = False

    fmt: ClassVar[str] = "tucker"

    def __post_init__(self):
        core = np.array(np.asarray(self.core), dtype=np.float64)
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "covariate_factors", _mats(self.covariate_factors))
        object.__setattr__(self, "response_factors", _mats(self.response_factors))
        factors = self.covariate_factors + self.response_factors
        if core.ndim != len(factors):
            raise RankError(f"Tucker core has order {core.ndim} but {len(factors)} factors were given")
        for k, (a, c) in enumerate(zip(factors, core.shape)):
            if a.ndim != 2 or a.shape[1] != c:
                raise RankError(f"Tucker factor {k + 1} has shape {a.shape}, core mode size is {c}")

    @property
    def covariate_dims(self):
        return tuple(a.shape[0] for a in self.covariate_factors)

    @property
    def response_dims(self):
        return tuple(a.shape[0] for a in self.response_factors)

    @property
    def ranks(self):
        return tuple(self.core.shape)


@dataclass(frozen=True, eq=False)
class CpCoeff:
    weights: np.ndarray | None
    covariate_factors: tuple[np.ndarray, ...]
    response_factors: tuple[np.ndarray, ...]

    fmt: ClassVar[str] = "cp"

    def __post_init__(self):
        object.__setattr__(self, "covariate_factors", _mats(self.covariate_factors))
        object.__setattr__(self, "response_factors", _mats(self.response_factors))
        factors = self.covariate_factors + self.response_factors
        if not factors:
            raise RankError("CP coefficient needs at least one factor")
        r = factors[0].shape[1]
        if any(a.ndim != 2 or a.shape[1] != r for a in factors):
            raise RankError("CP factors must share a common column count")
        w = np.ones(r) if self.weights is None else np.array(self.weights, dtype=np.float64).ravel()
        if w.size != r:
            raise RankError(f"CP weights have length {w.size}, rank is {r}")
        object.__setattr__(self, "weights", w)

    @property
    def rank(self):
        return self.weights.size

    @property
    def ranks(self):
        return (self.rank,)

    @property
    def covariate_dims(self):
        return tuple(a.shape[0] for a in self.covariate_factors)

    @property
    def response_dims(self):
        return tuple(a.shape[0] for a in self.response_factors)


@dataclass(frozen=True, eq=False)
class OpCoeff:
    factors: tuple[np.ndarray, ...]

    fmt: ClassVar[str] = "op"

    def __post_init__(self):
        object.__setattr__(self, "factors", _mats(self.factors))
        if not self.factors or any(a.ndim != 2 for a in self.factors):
            raise RankError("OP coefficient needs one matrix per mode pair")

    @property
    def ranks(self):
        return ()

    @property
    def covariate_dims(self):
        return tuple(a.shape[1] for a in self.factors)

    @property
    def response_dims(self):
        return tuple(a.shape[0] for a in self.factors)


@dataclass(frozen=True, eq=False)
class TrCoeff:
    covariate_cores: tuple[np.ndarray, ...]
    response_cores: tuple[np.ndarray, ...]

    fmt: ClassVar[str] = "tr"

    def __post_init__(self):
        object.__setattr__(self, "covariate_cores", _mats(self.covariate_cores))
        object.__setattr__(self, "response_cores", _mats(self.response_cores))
        ring = self.cores
        if not ring or any(c.ndim != 3 for c in ring):
            raise RankError("TR cores must all be order-3 arrays")
        for i, core in enumerate(ring):
            nxt = ring[(i + 1) % len(ring)]
            if core.shape[2] != nxt.shape[0]:
                raise RankError(
                    f"TR cyclic rank violation: core {i + 1} right rank {core.shape[2]} "
                    f"!= core {(i + 1) % len(ring) + 1} left rank {nxt.shape[0]}"
                )

    @property
    def cores(self):
        return self.covariate_cores + self.response_cores

    @property
    def ranks(self):
        """Bond dims (s_1..s_l, g_1..g_p); the last entry also closes the ring."""
        return tuple(c.shape[2] for c in self.cores)

    @property
    def covariate_dims(self):
        return tuple(c.shape[1] for c in self.covariate_cores)

    @property
    def response_dims(self):
        return tuple(c.shape[1] for c in self.response_cores)


LowRankCoeff = Union[TuckerCoeff, CpCoeff, OpCoeff, TrCoeff]


# ==============================================================================
# RECONSTRUCTION AND NORMS
# ==============================================================================

def _cp_full(weights, factors) -> np.ndarray:
    q = len(factors)
    operands = [weights, [q]]
    for k, a in enumerate(factors):
        operands += [a, [k, q]]
    return np.einsum(*operands, list(range(q)))


def _tr_full(cores, budget=None) -> np.ndarray:
    chain = chain_cores(cores, budget)
    return np.trace(chain, axis1=0, axis2=chain.ndim - 1)


def to_full(coeff: LowRankCoeff) -> DenseTensor:
    """Dense B with dims (h_1..h_l, m_1..m_p)."""
    if isinstance(coeff, TuckerCoeff):
        factors = coeff.covariate_factors + coeff.response_factors
        return DenseTensor(multi_mode_apply(coeff.core, factors, range(len(factors))))
    if isinstance(coeff, CpCoeff):
        return DenseTensor(_cp_full(coeff.weights, coeff.covariate_factors + coeff.response_factors))
    if isinstance(coeff, OpCoeff):
        return outer_product(*coeff.factors)
    if isinstance(coeff, TrCoeff):
        return DenseTensor(_tr_full(coeff.cores))
    raise TypeError(f"not a low-rank coefficient: {type(coeff).__name__}")


def coeff_norm(coeff: LowRankCoeff) -> float:
    """Frobenius norm of B without forming it (TR falls back to the dense tensor)."""
    if isinstance(coeff, TuckerCoeff):
        core = coeff.core
        for k, a in enumerate(coeff.covariate_factors + coeff.response_factors):
            _, r = np.linalg.qr(a)
            core = np.moveaxis(np.tensordot(r, core, axes=([1], [k])), 0, k)
        return float(np.linalg.norm(core))
    if isinstance(coeff, CpCoeff):
        gram = np.outer(coeff.weights, coeff.weights)
        for a in coeff.covariate_factors + coeff.response_factors:
            gram = gram * (a.T @ a)
        return float(np.sqrt(max(gram.sum(), 0.0)))
    if isinstance(coeff, OpCoeff):
        return float(np.prod([np.linalg.norm(a) for a in coeff.factors]))
    if isinstance(coeff, TrCoeff):
        return to_full(coeff).norm()
    raise TypeError(f"not a low-rank coefficient: {type(coeff).__name__}")


def param_count(coeff: LowRankCoeff) -> int:
    """Number of free parameters K_B of the format, with its identifiability constraints."""
    if isinstance(coeff, TuckerCoeff):
        total = int(np.prod(coeff.core.shape))
        for a in coeff.covariate_factors + coeff.response_factors:
            m, c = a.shape
            total += m * c - c * (c + 1) // 2
        return total
    if isinstance(coeff, CpCoeff):
        l, p = len(coeff.covariate_factors), len(coeff.response_factors)
        dims = sum(coeff.covariate_dims) + sum(coeff.response_dims)
        return coeff.rank * (dims - l - p + 1)
    if isinstance(coeff, OpCoeff):
        p = len(coeff.factors)
        return sum(a.size for a in coeff.factors) - p + 1
    if isinstance(coeff, TrCoeff):
        l, p = len(coeff.covariate_cores), len(coeff.response_cores)
        return sum(c.size for c in coeff.cores) - l - p + 1
    raise TypeError(f"not a low-rank coefficient: {type(coeff).__name__}")


# ==============================================================================
# RANKS AND RANDOM INITIALIZATION
# ==============================================================================

def validate_ranks(fmt, covariate_dims, response_dims, ranks):
    """Return ranks as a tuple after checking them against the format."""
    l, p = len(covariate_dims), len(response_dims)
    if fmt not in FORMATS:
        raise RankError(f"unknown format '{fmt}'")
    if fmt == "op":
        if l != p:
            raise RankError(f"OP format pairs covariate and response modes, got l={l}, p={p}")
        return ()
    if ranks is None:
        raise RankError(f"format '{fmt}' needs ranks")
    ranks = (int(ranks),) if np.isscalar(ranks) else tuple(int(r) for r in ranks)
    if any(r < 1 for r in ranks):
        raise RankError(f"ranks must be positive, got {ranks}")
    if fmt == "cp":
        if len(ranks) != 1:
            raise RankError(f"CP format takes a single rank, got {ranks}")
    elif len(ranks) != l + p:
        raise RankError(f"{fmt} format needs {l + p} ranks, got {len(ranks)}")
    if fmt == "tucker":
        for k, (r, m) in enumerate(zip(ranks, tuple(covariate_dims) + tuple(response_dims))):
            if r > m:
                raise RankError(f"Tucker rank {r} exceeds mode {k + 1} size {m}")
    return ranks


def random_coeff(fmt, covariate_dims, response_dims, ranks=None, seed=None) -> LowRankCoeff:
    """Coefficient with iid U(0,1) entries, reproducible for a fixed seed."""
    ranks = validate_ranks(fmt, covariate_dims, response_dims, ranks)
    rng = np.random.default_rng(seed)
    if fmt == "tucker":
        l = len(covariate_dims)
        dims = tuple(covariate_dims) + tuple(response_dims)
        factors = [rng.uniform(size=(m, c)) for m, c in zip(dims, ranks)]
        core = rng.uniform(size=ranks)
        return TuckerCoeff(core, factors[:l], factors[l:])
    if fmt == "cp":
        r = ranks[0]
        cov = [rng.uniform(size=(h, r)) for h in covariate_dims]
        resp = [rng.uniform(size=(m, r)) for m in response_dims]
        return CpCoeff(np.ones(r), cov, resp)
    if fmt == "op":
        return OpCoeff([rng.uniform(size=(m, h)) for m, h in zip(response_dims, covariate_dims)])
    dims = tuple(covariate_dims) + tuple(response_dims)
    cores = [rng.uniform(size=(ranks[i - 1], d, ranks[i])) for i, d in enumerate(dims)]
    l = len(covariate_dims)
    return TrCoeff(cores[:l], cores[l:])


# ==============================================================================
# FACTOR-WISE CONTRACTION <X_i | B>
# ==============================================================================

def covariate_weights_cp(coeff: CpCoeff, X: np.ndarray, skip: int | None = None) -> np.ndarray:
    """w_i = super-diagonal of [[X_i; L_1', ..., L_l']] for a stack X (n, h...).

    With `skip = j` the j-th covariate mode is left open and the result has
    shape (n, h_j, r).
    """
    l = len(coeff.covariate_factors)
    r = coeff.rank
    rlab = l + 1
    operands = [X, list(range(l + 1))]
    for j, a in enumerate(coeff.covariate_factors):
        if j != skip:
            operands += [a, [j + 1, rlab]]
    out = [0, rlab] if skip is None else [0, skip + 1, rlab]
    if l == 0:
        return np.ones((X.shape[0], r))
    return np.einsum(*operands, out, optimize=True)


def covariate_chain_tr(coeff: TrCoeff, X: np.ndarray) -> np.ndarray:
    """Lambda_i = sum_j X_i(j) L_1[:,j_1,:] ... L_l[:,j_l,:], shape (n, s_0, s_l)."""
    l = len(coeff.covariate_cores)
    chain = chain_cores(coeff.covariate_cores)
    return np.tensordot(X, chain, axes=(list(range(1, l + 1)), list(range(1, l + 1))))


def partial_predict(coeff: LowRankCoeff, X: np.ndarray) -> np.ndarray:
    """Stack of <X_i | B> for X of shape (n, h_1..h_l); returns (n, m_1..m_p)."""
    X = np.asarray(X, dtype=np.float64)
    cov_dims = tuple(coeff.covariate_dims)
    if X.shape[1:] != cov_dims:
        raise TensorShapeError(f"covariates have dims {X.shape[1:]}, coefficient expects {cov_dims}")
    n = X.shape[0]

    if isinstance(coeff, TuckerCoeff):
        l = len(cov_dims)
        w = multi_mode_apply(X, [a.T for a in coeff.covariate_factors], range(1, l + 1))
        pred = np.tensordot(w, coeff.core, axes=(list(range(1, l + 1)), list(range(l))))
        p = len(coeff.response_factors)
        return multi_mode_apply(pred, coeff.response_factors, range(1, p + 1))

    if isinstance(coeff, CpCoeff):
        w = covariate_weights_cp(coeff, X) * coeff.weights
        p = len(coeff.response_factors)
        operands = [w, [0, p + 1]]
        for k, a in enumerate(coeff.response_factors):
            operands += [a, [k + 1, p + 1]]
        return np.einsum(*operands, list(range(p + 1)), optimize=True)

    if isinstance(coeff, OpCoeff):
        p = len(coeff.factors)
        return multi_mode_apply(X, coeff.factors, range(1, p + 1))

    if isinstance(coeff, TrCoeff):
        lam = covariate_chain_tr(coeff, X)
        chain = chain_cores(coeff.response_cores)
        p = len(coeff.response_cores)
        a_lab, b_lab = p + 1, p + 2
        return np.einsum(
            lam, [0, a_lab, b_lab],
            chain, [b_lab] + list(range(1, p + 1)) + [a_lab],
            list(range(p + 1)),
            optimize=True,
        )
    raise TypeError(f"not a low-rank coefficient: {type(coeff).__name__}")


# ==============================================================================
# SERIALIZATION
# ==============================================================================

MANIFEST = "manifest.json"


def _factor_lists(coeff):
    if isinstance(coeff, TuckerCoeff):
        return {"core": [coeff.core], "covariate": coeff.covariate_factors, "response": coeff.response_factors}
    if isinstance(coeff, CpCoeff):
        return {"weights": [coeff.weights], "covariate": coeff.covariate_factors, "response": coeff.response_factors}
    if isinstance(coeff, OpCoeff):
        return {"response": coeff.factors}
    return {"covariate": coeff.covariate_cores, "response": coeff.response_cores}


def save_coeff(coeff: LowRankCoeff, directory) -> Path:
    """Write each factor as a DTEN1 file plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for group, arrays in _factor_lists(coeff).items():
        names = []
        for i, a in enumerate(arrays, start=1):
            name = f"{group}_{i}.dten"
            write_tensor(directory / name, a)
            names.append(name)
        files[group] = names
    manifest = {
        "format": coeff.fmt,
        "ranks": list(coeff.ranks),
        "covariate_dims": list(coeff.covariate_dims),
        "response_dims": list(coeff.response_dims),
        "files": files,
    }
    if isinstance(coeff, TuckerCoeff):
        manifest["orthogonal"] = coeff.orthogonal
    path = directory / MANIFEST
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def load_coeff(directory) -> LowRankCoeff:
    directory = Path(directory)
    try:
        with open(directory / MANIFEST, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"cannot read coefficient manifest in {directory}: {exc}") from exc

    def arrays(group):
        return [read_tensor(directory / name).array for name in manifest["files"].get(group, [])]

    fmt = manifest.get("format")
    if fmt == "tucker":
        return TuckerCoeff(arrays("core")[0], arrays("covariate"), arrays("response"),
                           orthogonal=manifest.get("orthogonal", False))
    if fmt == "cp":
        return CpCoeff(arrays("weights")[0], arrays("covariate"), arrays("response"))
    if fmt == "op":
        return OpCoeff(arrays("response"))
    if fmt == "tr":
        return TrCoeff(arrays("covariate"), arrays("response"))
    raise TensorFileError(f"{directory}: unknown coefficient format {fmt!r}")
