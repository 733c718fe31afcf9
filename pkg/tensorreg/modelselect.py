"""
Model selection and TANOVA
==========================

- bic / rank_search: BIC = K log(n) - 2 loglik over a grid of rank candidates,
  fitted independently (optionally in a process pool)
- TanovaDesign: single-entry covariates for an l-factor layout, so that
  <X_i | B> is the slice B[j_1..j_l, :, ..., :] of the observation's cell
- wilks_lambda: ratio of generalized determinants of residual cross-products
  of a full and a nested reduced fit, with Monte-Carlo null quantiles
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from tensorreg.config import RUNTIME
from tensorreg.errors import DegenerateScaleError, ModelSelectionError, TensorRegError, TensorShapeError
from tensorreg.estimation import ToTRFit, ToTRSpec, as_stack, fit, residuals
from tensorreg.lowrank import CpCoeff, LowRankCoeff, OpCoeff, TrCoeff, TuckerCoeff, param_count, validate_ranks

logger = logging.getLogger(__name__)

GDET_TOL = 1e-10
LAMBDA_SLACK = 1e-8


def parallel_map(worker, tasks, jobs=None) -> list:
    """`worker` over `tasks` in input order, in a process pool when jobs > 1 (-1 = all cores).

    `worker` must be a module-level function so it pickles.
    """
    tasks = list(tasks)
    jobs = RUNTIME["jobs"] if jobs is None else int(jobs)
    if jobs == -1:
        jobs = os.cpu_count() or 1
    jobs = max(1, min(jobs, len(tasks)))
    if jobs == 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


# ==============================================================================
# BIC
# ==============================================================================

def parameter_count(fit_result: ToTRFit) -> int:
    """K = K_Sigma + K_B, with sigma2 counted once in K_Sigma."""
    p = len(fit_result.scales)
    models = fit_result.spec.resolved_scale_models(p) if fit_result.spec is not None else None
    k_sigma = 1
    for k, s in enumerate(fit_result.scales):
        if models is None:
            m = s.shape[0]
            k_sigma += m * (m + 1) // 2 - 1
        else:
            k_sigma += models[k].param_count(s.shape[0])
    return k_sigma + param_count(fit_result.coeff)


def bic(fit_result: ToTRFit, n=None) -> float:
    """K log(n) - 2 loglik at the fitted parameters."""
    n = fit_result.n if n is None else n
    if not fit_result.converged:
        msg = "BIC of an unconverged fit"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return parameter_count(fit_result) * math.log(n) - 2.0 * fit_result.loglik


@dataclass(frozen=True)
class RankGrid:
    """Candidate rank vectors for one format."""

    fmt: str
    candidates: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        cands = tuple((int(c),) if np.isscalar(c) else tuple(int(r) for r in c) for c in self.candidates)
        if not cands:
            raise ModelSelectionError("rank grid is empty")
        object.__setattr__(self, "fmt", str(self.fmt).lower())
        object.__setattr__(self, "candidates", cands)

    @classmethod
    def product(cls, fmt, options):
        """Every combination of per-position rank options, e.g. ([1, 2], [1, 2, 3])."""
        return cls(fmt, tuple(product(*options)))

    def validate(self, covariate_dims, response_dims):
        for c in self.candidates:
            validate_ranks(self.fmt, covariate_dims, response_dims, c)
        return self

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


@dataclass(frozen=True)
class BicRow:
    ranks: tuple[int, ...]
    k: int
    loglik: float
    bic: float
    converged: bool
    error: str | None = None


@dataclass(frozen=True, eq=False)
class RankSearchResult:
    best: ToTRFit
    table: tuple[BicRow, ...]

    @property
    def best_ranks(self):
        return tuple(self.best.coeff.ranks)


def candidate_seed(seed, ranks) -> int:
    """Per-candidate seed that depends on the candidate, not on its grid position."""
    return int(np.random.SeedSequence([int(seed or 0), *ranks]).generate_state(1)[0])


def _fit_candidate(args):
    spec, X, Y = args
    try:
        return spec.ranks, fit(spec, X, Y), None
    except (TensorRegError, np.linalg.LinAlgError, ValueError) as exc:
        return spec.ranks, None, f"{type(exc).__name__}: {exc}"


def rank_search(spec: ToTRSpec, grid: RankGrid, X, Y, jobs=None) -> RankSearchResult:
    """Fit every candidate of the grid and keep the smallest BIC.

    Ties go to the smaller K, then to the lexicographically smaller ranks, so
    the outcome does not depend on grid order. Failed candidates stay in the
    table with NaN entries.

    Raises:
        ModelSelectionError: Every candidate failed.
    """
    xs, ys = as_stack(X, "covariates"), as_stack(Y, "responses")
    if grid.fmt != spec.fmt:
        raise ModelSelectionError(f"grid is for format '{grid.fmt}', spec fits '{spec.fmt}'")
    grid.validate(xs.shape[1:], ys.shape[1:])
    n = xs.shape[0]
    tasks = [(replace(spec, ranks=c, seed=candidate_seed(spec.seed, c)), xs, ys) for c in grid]
    results = parallel_map(_fit_candidate, tasks, jobs)

    rows, fits = [], {}
    for ranks, fitted, error in results:
        if fitted is None:
            logger.warning("candidate %s failed: %s", ranks, error)
            rows.append(BicRow(ranks, -1, float("nan"), float("nan"), False, error))
            continue
        rows.append(BicRow(ranks, parameter_count(fitted), fitted.loglik, bic(fitted, n), fitted.converged))
        fits[ranks] = fitted
        logger.info("ranks %s: K=%d loglik=%.6g BIC=%.6g", ranks, rows[-1].k, rows[-1].loglik, rows[-1].bic)

    if not fits:
        raise ModelSelectionError(f"all {len(rows)} rank candidates failed")
    ok = [r for r in rows if r.error is None]
    best = min(ok, key=lambda r: (r.bic, r.k, r.ranks))
    return RankSearchResult(fits[best.ranks], tuple(rows))


# ==============================================================================
# TANOVA DESIGNS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class TanovaDesign:
    """Cell layout of an l-factor design; labels are 1-based, one row per observation."""

    levels: tuple[int, ...]
    labels: np.ndarray

    def __post_init__(self):
        levels = tuple(int(h) for h in self.levels)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1, len(levels))
        if any(h < 1 for h in levels):
            raise TensorShapeError(f"factor level counts must be positive, got {levels}")
        if (labels < 1).any() or (labels > np.array(levels)).any():
            raise TensorShapeError(f"labels outside the level ranges {levels}")
        labels.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.labels.shape[0]

    @property
    def counts(self) -> np.ndarray:
        counts = np.zeros(self.levels, dtype=np.int64)
        np.add.at(counts, tuple((self.labels - 1).T), 1)
        return counts

    @property
    def balanced_q(self) -> int | None:
        """Replicates per cell when every cell has the same positive count."""
        counts = self.counts
        q = int(counts.flat[0])
        return q if q > 0 and np.all(counts == q) else None

    def covariates(self) -> np.ndarray:
        """Stack (n, h_1..h_l) of single-entry tensors."""
        X = np.zeros((self.n,) + self.levels)
        X[(np.arange(self.n),) + tuple((self.labels - 1).T)] = 1.0
        return X


def build_tanova_design(levels, labels):
    """TanovaDesign and its covariate stack; empty cells only warn."""
    design = TanovaDesign(levels, labels)
    empty = int(np.sum(design.counts == 0))
    if empty:
        msg = f"TANOVA design has {empty} empty cell(s); the full model is not identifiable there"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return design, design.covariates()


def reduced_design(design: TanovaDesign, drop_mode: int) -> TanovaDesign:
    """Nested design for 'factor `drop_mode` has no effect': that factor collapses to one level."""
    k = drop_mode - 1
    if not 0 <= k < len(design.levels):
        raise TensorShapeError(f"factor {drop_mode} out of range 1..{len(design.levels)}")
    levels = list(design.levels)
    levels[k] = 1
    labels = design.labels.copy()
    labels[:, k] = 1
    return TanovaDesign(tuple(levels), labels)


def reduced_ranks(fmt, ranks, drop_mode):
    """Ranks of the reduced model: CP and TR keep theirs, Tucker gets rank 1 on the collapsed mode."""
    if fmt != "tucker":
        return tuple(ranks)
    ranks = list(ranks)
    ranks[drop_mode - 1] = 1
    return tuple(ranks)


def embed_reduced_coeff(coeff: LowRankCoeff, covariate_dims, ranks=None) -> LowRankCoeff:
    """The reduced coefficient as a point of the full model.

    Every collapsed covariate mode (size 1 in `coeff`, h in `covariate_dims`)
    is repeated h times, so <X_full_i | B> equals <X_reduced_i | B_reduced>.
    Tucker factors on those modes are padded to `ranks` with an orthonormal
    complement and zero core slices.
    """
    red = tuple(coeff.covariate_dims)
    full = tuple(int(h) for h in covariate_dims)
    if len(red) != len(full) or any(a != b and a != 1 for a, b in zip(red, full)):
        raise TensorShapeError(f"covariate dims {red} are not a collapse of {full}")
    modes = [j for j, (a, b) in enumerate(zip(red, full)) if a != b]

    if isinstance(coeff, CpCoeff):
        cov = [np.repeat(L, full[j], axis=0) if j in modes else L for j, L in enumerate(coeff.covariate_factors)]
        return CpCoeff(coeff.weights, cov, coeff.response_factors)
    if isinstance(coeff, OpCoeff):
        return OpCoeff([np.repeat(A, full[j], axis=1) if j in modes else A for j, A in enumerate(coeff.factors)])
    if isinstance(coeff, TrCoeff):
        cov = [np.repeat(c, full[j], axis=1) if j in modes else c for j, c in enumerate(coeff.covariate_cores)]
        return TrCoeff(cov, coeff.response_cores)

    target = tuple(ranks) if ranks is not None else coeff.core.shape
    core = coeff.core
    cov = list(coeff.covariate_factors)
    for j in modes:
        h, r, c = full[j], int(target[j]), core.shape[j]
        col = np.repeat(cov[j], h, axis=0)
        if r > c:
            q, _ = np.linalg.qr(np.hstack([col, np.eye(h)[:, :r - c]]))
            col = np.hstack([col, q[:, c:r]])
            pad = [(0, r - c) if axis == j else (0, 0) for axis in range(core.ndim)]
            core = np.pad(core, pad)
        cov[j] = col
    return TuckerCoeff(core, cov, coeff.response_factors)


def fit_nested(spec: ToTRSpec, X_full, Y, reduced: ToTRFit) -> ToTRFit:
    """Full-model fit that is never worse than the reduced fit.

    Runs the usual random start and a warm start from the reduced estimate
    embedded in the full design, and keeps the higher log-likelihood.
    """
    xs = as_stack(X_full, "covariates")
    ranks = validate_ranks(spec.fmt, xs.shape[1:], reduced.response_dims, spec.ranks or None)
    cold = fit(spec, xs, Y)
    start = replace(reduced, coeff=embed_reduced_coeff(reduced.coeff, xs.shape[1:], ranks))
    warm = fit(spec, xs, Y, init=start)
    best = warm if warm.loglik >= cold.loglik else cold
    logger.debug("nested %s fit: random start loglik=%.10g, warm start loglik=%.10g",
                 spec.fmt, cold.loglik, warm.loglik)
    return best


# ==============================================================================
# WILKS' LAMBDA
# ==============================================================================

def generalized_logdet(resid: np.ndarray, tol=GDET_TOL) -> tuple[float, int]:
    """log of the product of the eigenvalues of R'R above tol * max, from the smaller Gram."""
    r = resid.reshape(resid.shape[0], -1)
    gram = r @ r.T if r.shape[0] <= r.shape[1] else r.T @ r
    w = np.linalg.eigvalsh((gram + gram.T) / 2)
    if w[-1] <= 0:
        raise DegenerateScaleError("residual cross-product is zero; generalized determinant undefined")
    kept = w[w > tol * w[-1]]
    return float(np.sum(np.log(kept))), kept.size


def wilks_lambda(full: ToTRFit, reduced: ToTRFit, Y, X_full, X_reduced, tol=GDET_TOL) -> float:
    """Lambda = gdet(full residual cross-product) / gdet(reduced residual cross-product).

    The reduced estimate embedded in the full design is itself a full-model
    point with Lambda = 1, so a ratio above 1 + LAMBDA_SLACK means the full
    fit is a worse local optimum: it is reported and Lambda is set to 1.
    """
    ys = as_stack(Y, "responses")
    if full.response_dims != reduced.response_dims:
        raise TensorShapeError("full and reduced fits have different response dims")
    r_full = np.stack([r.array for r in residuals(full, X_full, ys)])
    r_red = np.stack([r.array for r in residuals(reduced, X_reduced, ys)])
    ld_full, rank_full = generalized_logdet(r_full, tol)
    ld_red, rank_red = generalized_logdet(r_red, tol)
    if rank_full != rank_red:
        logger.debug("generalized determinants over ranks %d (full) and %d (reduced)", rank_full, rank_red)
    lam = float(np.exp(ld_full - ld_red))
    if lam > 1.0 + LAMBDA_SLACK:
        msg = (f"Wilks' Lambda {lam:.8g} > 1: the full {full.coeff.fmt} fit leaves a larger residual "
               f"determinant than the nested reduced fit; using Lambda = 1")
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return 1.0
    return min(lam, 1.0)


def tanova_fits(full_spec: ToTRSpec, reduced_spec: ToTRSpec, X_full, X_reduced, Y):
    """Reduced fit, nested full fit and their Lambda."""
    reduced = fit(reduced_spec, X_reduced, Y)
    full = fit_nested(full_spec, X_full, Y, reduced)
    return full, reduced, wilks_lambda(full, reduced, Y, X_full, X_reduced)


def _wilks_replicate(args):
    full_spec, reduced_spec, generator, seed = args
    rng = np.random.default_rng(seed)
    x_full, x_red, y = generator(rng)
    return tanova_fits(full_spec, reduced_spec, x_full, x_red, y)[2]


def wilks_mc_values(full_spec, reduced_spec, generator, B=200, seed=0, jobs=None) -> np.ndarray:
    """Lambda over B datasets from `generator(rng) -> (X_full, X_reduced, Y)`, seeded per replicate."""
    if B < 1:
        raise ValueError("B must be at least 1")
    seeds = np.random.SeedSequence(seed).spawn(B)
    tasks = [(full_spec, reduced_spec, generator, s) for s in seeds]
    return np.array(parallel_map(_wilks_replicate, tasks, jobs))


def wilks_mc_quantile(full_spec, reduced_spec, generator, B=200, level=0.95, seed=0, jobs=None) -> float:
    """Empirical `level` quantile of Lambda over B simulated datasets."""
    values = wilks_mc_values(full_spec, reduced_spec, generator, B, seed, jobs)
    return float(np.quantile(values, level))
