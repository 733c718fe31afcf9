"""
Tensor-on-tensor regression fit
===============================

Model: Y_i = U + <X_i | B> + E_i,  E_i ~ TVN(0, sigma2 * Sigma_p x ... x Sigma_1).

`fit` profiles the intercept out by centering, then runs block relaxation:

    tucker : M_1..M_p, V, L_1..L_l, then Sigma_1..Sigma_p (+ sigma2)
    cp     : L_1..L_l, then (M_k, Sigma_k) pairs
    op     : (M_k, Sigma_k) pairs
    tr     : covariate cores, then (response core k, Sigma_k) pairs

Every block is an exact maximizer of the profile log-likelihood given the
others, so the recorded trace never decreases.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tensorreg.config import FIT_DEFAULTS, FORMATS, validate_model_section
from tensorreg.covariance import ScaleModel, profile_loglik
from tensorreg.errors import RankError, TensorFileError, TensorShapeError
from tensorreg.lowrank import (
    CpCoeff,
    LowRankCoeff,
    OpCoeff,
    TrCoeff,
    TuckerCoeff,
    coeff_norm,
    load_coeff,
    partial_predict,
    random_coeff,
    save_coeff,
    validate_ranks,
)
from tensorreg.tensor_core import DenseTensor, mode_apply
from tensorreg.tensor_io import read_table, read_tensor, write_table, write_tensor
from tensorreg.updates import (
    FitState,
    cp_update_L,
    cp_update_M,
    op_update,
    tr_update,
    tucker_reorthonormalize,
    tucker_update_L,
    tucker_update_M,
    tucker_update_V,
    update_scale,
)

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class ToTRSpec:
    """What to fit: format, ranks, per-mode scale models and stopping rules.

    `scale_models=None` means unstructured on every response mode;
    `tol_loglik=None` means 1e-6 |loglik| + 1e-8.
    """

    fmt: str
    ranks: tuple[int, ...] = ()
    scale_models: tuple[ScaleModel, ...] | None = None
    intercept: bool = True
    max_iter: int = FIT_DEFAULTS["max_iter"]
    tol_loglik: float | None = None
    tol_norm: float = FIT_DEFAULTS["tol_norm"]
    seed: int | None = 0
    allow_pinv: bool = False

    def __post_init__(self):
        fmt = str(self.fmt).lower()
        if fmt not in FORMATS:
            raise RankError(f"unknown format '{self.fmt}'")
        object.__setattr__(self, "fmt", fmt)
        ranks = self.ranks
        if ranks is None:
            ranks = ()
        elif np.isscalar(ranks):
            ranks = (int(ranks),)
        object.__setattr__(self, "ranks", tuple(int(r) for r in ranks))
        if self.scale_models is not None:
            object.__setattr__(self, "scale_models", tuple(ScaleModel.parse(s) for s in self.scale_models))
        if self.tol_loglik is not None and not self.tol_loglik > 0:
            raise ValueError(f"tol_loglik must be positive, got {self.tol_loglik}")
        if not self.tol_norm > 0:
            raise ValueError(f"tol_norm must be positive, got {self.tol_norm}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")

    @classmethod
    def from_config(cls, section):
        section = validate_model_section(dict(section))
        kwargs = {"fmt": section["format"], "ranks": section.get("ranks")}
        for key in ("scale_models", "intercept", "max_iter", "tol_loglik", "tol_norm", "seed", "allow_pinv"):
            if key in section:
                kwargs[key] = section[key]
        return cls(**kwargs)

    def to_config(self):
        """Inverse of `from_config`; unset optional keys are left out."""
        section = {
            "format": self.fmt,
            "ranks": list(self.ranks),
            "scale_models": None if self.scale_models is None else [s.kind for s in self.scale_models],
            "intercept": self.intercept,
            "max_iter": self.max_iter,
            "tol_loglik": self.tol_loglik,
            "tol_norm": self.tol_norm,
            "seed": self.seed,
            "allow_pinv": self.allow_pinv,
        }
        return {k: v for k, v in section.items() if v is not None}

    def resolved_scale_models(self, p):
        if self.scale_models is None:
            return (ScaleModel("unstructured"),) * p
        if len(self.scale_models) != p:
            raise TensorShapeError(f"{len(self.scale_models)} scale models for {p} response modes")
        return self.scale_models

    def loglik_tolerance(self, loglik):
        if self.tol_loglik is not None:
            return self.tol_loglik
        return FIT_DEFAULTS["tol_rel"] * abs(loglik) + FIT_DEFAULTS["tol_abs"]


def spec_from_config(section) -> ToTRSpec:
    return ToTRSpec.from_config(section)


@dataclass(frozen=True, eq=False)
class ToTRFit:
    coeff: LowRankCoeff
    intercept: DenseTensor
    scales: tuple[np.ndarray, ...]
    sigma2: float
    loglik_trace: tuple[float, ...]
    converged: bool
    iterations: int
    spec: ToTRSpec | None = None
    n: int = 0
    norm_trace: tuple[float, ...] = ()
    block_times: dict = field(default_factory=dict)
    rhos: tuple = ()

    @property
    def loglik(self):
        return self.loglik_trace[-1] if self.loglik_trace else float("nan")

    @property
    def covariate_dims(self):
        return tuple(self.coeff.covariate_dims)

    @property
    def response_dims(self):
        return tuple(self.coeff.response_dims)


@dataclass(frozen=True)
class IterationRecord:
    loglik: float
    norm: float


@dataclass(frozen=True)
class ConvergenceDecision:
    converged: bool
    reason: str | None = None

    def __bool__(self):
        return self.converged


# ==============================================================================
# DATA PREPARATION
# ==============================================================================

def as_stack(obs, name="observations") -> np.ndarray:
    """Stack a list of tensors along a new leading axis; an ndarray is taken as (n, dims...)."""
    if isinstance(obs, np.ndarray):
        arr = np.asarray(obs, dtype=np.float64)
    else:
        items = [np.asarray(o, dtype=np.float64) for o in obs]
        if not items:
            raise ValueError(f"no {name}")
        shapes = {a.shape for a in items}
        if len(shapes) != 1:
            raise TensorShapeError(f"{name} have inconsistent dims {sorted(shapes)}")
        arr = np.stack(items)
    if arr.ndim < 2:
        arr = arr.reshape(arr.shape + (1,) * (2 - arr.ndim))
    return arr


def center_and_profile_intercept(X, Y):
    """Remove observation means.

    Returns:
        (Xc, Yc, X_mean, Y_mean): centered stacks (n, ...) and the means as
        DenseTensors. The intercept is recovered after fitting as
        Y_mean - <X_mean | B>.
    """
    xs, ys = as_stack(X, "covariates"), as_stack(Y, "responses")
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise ValueError("cannot center an empty sample (n = 0)")
    if xs.shape[0] != ys.shape[0]:
        raise TensorShapeError(f"{xs.shape[0]} covariates but {ys.shape[0]} responses")
    x_mean, y_mean = xs.mean(axis=0), ys.mean(axis=0)
    return xs - x_mean, ys - y_mean, DenseTensor(x_mean), DenseTensor(y_mean)


# ==============================================================================
# CONVERGENCE
# ==============================================================================

def convergence_check(prev, curr, spec) -> ConvergenceDecision:
    """Converged iff |d loglik| < tol_loglik or |d (||B|| + sigma prod ||Sigma_k||)| < tol_norm.

    Both comparisons are strict; there is no decision without a previous record.
    """
    if prev is None:
        return ConvergenceDecision(False)
    if abs(curr.loglik - prev.loglik) < spec.loglik_tolerance(curr.loglik):
        return ConvergenceDecision(True, "loglik")
    if abs(curr.norm - prev.norm) < spec.tol_norm:
        return ConvergenceDecision(True, "norm")
    return ConvergenceDecision(False)


def _combined_norm(state):
    scale = np.prod([np.linalg.norm(s) for s in state.scales])
    return coeff_norm(state.coeff()) + np.sqrt(state.sigma2) * scale


# ==============================================================================
# SWEEPS
# ==============================================================================

@contextmanager
def _timed(times, name):
    start = time.perf_counter()
    try:
        yield
    finally:
        times[name] += time.perf_counter() - start


def _sweep_tucker(state, times):
    with _timed(times, "M"):
        tucker_reorthonormalize(state)
        for k in range(1, state.p + 1):
            tucker_update_M(k, state)
    with _timed(times, "V"):
        tucker_update_V(state)
    with _timed(times, "L"):
        for k in range(1, state.l + 1):
            tucker_update_L(k, state)
    with _timed(times, "Sigma"):
        resid = state.residuals()
        for k in range(1, state.p + 1):
            update_scale(k, state, resid)


def _sweep_cp(state, times):
    with _timed(times, "L"):
        for k in range(1, state.l + 1):
            cp_update_L(k, state)
    with _timed(times, "M"):
        for k in range(1, state.p + 1):
            cp_update_M(k, state)


def _sweep_op(state, times):
    with _timed(times, "M"):
        for k in range(1, state.p + 1):
            op_update(k, state)


def _sweep_tr(state, times):
    with _timed(times, "L"):
        for k in range(1, state.l + 1):
            tr_update(k, state, "covariate")
    for k in range(1, state.p + 1):
        with _timed(times, "M"):
            tr_update(k, state, "response")
        with _timed(times, "Sigma"):
            update_scale(k, state)


SWEEPS = {"tucker": _sweep_tucker, "cp": _sweep_cp, "op": _sweep_op, "tr": _sweep_tr}


def _load_coeff(state, coeff):
    """Put a coefficient's factors into `state`; CP weights fold into the last response factor."""
    if isinstance(coeff, TuckerCoeff):
        state.core = coeff.core.copy()
        state.covariate = [a.copy() for a in coeff.covariate_factors]
        state.response = [a.copy() for a in coeff.response_factors]
    elif isinstance(coeff, CpCoeff):
        state.covariate = [a.copy() for a in coeff.covariate_factors]
        resp = [a.copy() for a in coeff.response_factors]
        resp[-1] = resp[-1] * coeff.weights[None, :]
        state.response = resp
    elif isinstance(coeff, OpCoeff):
        state.response = [a.copy() for a in coeff.factors]
    else:
        state.covariate = [c.copy() for c in coeff.covariate_cores]
        state.response = [c.copy() for c in coeff.response_cores]


def _warm_state(spec, xc, yc, ranks, models, init):
    cov_dims, resp_dims = xc.shape[1:], yc.shape[1:]
    coeff = init.coeff
    if coeff.fmt != spec.fmt:
        raise RankError(f"warm start is a {coeff.fmt} coefficient, the fit is {spec.fmt}")
    if tuple(coeff.covariate_dims) != tuple(cov_dims) or tuple(coeff.response_dims) != tuple(resp_dims):
        raise TensorShapeError(
            f"warm start has dims {tuple(coeff.covariate_dims)} -> {tuple(coeff.response_dims)}, "
            f"data has {tuple(cov_dims)} -> {tuple(resp_dims)}")
    if tuple(coeff.ranks) != tuple(ranks):
        raise RankError(f"warm start has ranks {tuple(coeff.ranks)}, the fit uses {tuple(ranks)}")
    state = FitState(
        X=xc,
        Y=yc,
        fmt=spec.fmt,
        scale_models=tuple(models),
        scales=[np.array(s, dtype=np.float64) for s in init.scales],
        sigma2=float(init.sigma2),
        rhos=list(init.rhos) or [None] * len(models),
        allow_pinv=spec.allow_pinv,
    )
    _load_coeff(state, coeff)
    return state


def _initial_state(spec, xc, yc, ranks, models):
    cov_dims, resp_dims = xc.shape[1:], yc.shape[1:]
    rng = np.random.default_rng(spec.seed)
    init = random_coeff(spec.fmt, cov_dims, resp_dims, ranks, seed=rng)
    state = FitState(
        X=xc,
        Y=yc,
        fmt=spec.fmt,
        scale_models=tuple(models),
        scales=[model.matrix(m) for model, m in zip(models, resp_dims)],
        rhos=[model.rho if model.kind in ("ar1", "equicorr") else None for model in models],
        allow_pinv=spec.allow_pinv,
    )
    if spec.fmt == "tucker":
        core = init.core
        covariate = []
        for j, L in enumerate(init.covariate_factors):
            q, r = np.linalg.qr(L)
            covariate.append(q)
            core = mode_apply(core, r, j)
        state.core = core
        state.covariate = covariate
        state.response = list(init.response_factors)
    elif spec.fmt == "cp":
        state.covariate = list(init.covariate_factors)
        state.response = list(init.response_factors)
    elif spec.fmt == "op":
        state.response = list(init.factors)
    else:
        state.covariate = list(init.covariate_cores)
        state.response = list(init.response_cores)
    return state


def _finalize(state) -> LowRankCoeff:
    if state.fmt == "tucker":
        tucker_reorthonormalize(state)
        return TuckerCoeff(state.core, state.covariate, state.response, orthogonal=True)
    if state.fmt == "cp":
        last = state.response[-1]
        weights = np.linalg.norm(last, axis=0)
        safe = np.where(weights > 0, weights, 1.0)
        return CpCoeff(weights, state.covariate, state.response[:-1] + [last / safe])
    if state.fmt == "op":
        return OpCoeff(state.response)
    return TrCoeff(state.covariate, state.response)


def fit(spec: ToTRSpec, X, Y, init: ToTRFit | None = None) -> ToTRFit:
    """Maximum-likelihood fit of the tensor-on-tensor regression.

    Args:
        spec: Format, ranks, scale models and stopping rules.
        X: Covariates, a list of n tensors of dims (h_1..h_l) or a stack (n, h...).
        Y: Responses, a list of n tensors of dims (m_1..m_p) or a stack (n, m...).
        init: Optional warm start. Its coefficient, scales and sigma2 replace
            the random starting point (`spec.seed` is then unused).

    Returns:
        ToTRFit with the coefficient, intercept, scales, sigma2 and the
        per-iteration log-likelihood trace.

    Raises:
        SingularSystemError: A block's normal equations are singular and
            `spec.allow_pinv` is off.
        RankError: Ranks are invalid for the format.
    """
    xs, ys = as_stack(X, "covariates"), as_stack(Y, "responses")
    n = xs.shape[0]
    if n < 1:
        raise ValueError("fit needs at least one observation")
    if ys.shape[0] != n:
        raise TensorShapeError(f"{n} covariates but {ys.shape[0]} responses")
    cov_dims, resp_dims = xs.shape[1:], ys.shape[1:]
    ranks = validate_ranks(spec.fmt, cov_dims, resp_dims, spec.ranks or None)
    models = spec.resolved_scale_models(len(resp_dims))

    if spec.intercept:
        xc, yc, x_mean, y_mean = center_and_profile_intercept(xs, ys)
    else:
        xc, yc = xs, ys
        x_mean, y_mean = DenseTensor(np.zeros(cov_dims)), DenseTensor(np.zeros(resp_dims))

    if init is None:
        state = _initial_state(spec, xc, yc, ranks, models)
    else:
        state = _warm_state(spec, xc, yc, ranks, models, init)
    sweep = SWEEPS[spec.fmt]
    m = state.m
    times = defaultdict(float)
    trace, norms = [], []
    prev, converged, iterations = None, False, 0

    for iterations in range(1, spec.max_iter + 1):
        sweep(state, times)
        loglik = profile_loglik(state.sigma2, state.scales, n, m)
        if trace and loglik < trace[-1] - MONOTONE_SLACK * max(1.0, abs(loglik)):
            logger.warning("%s fit: log-likelihood decreased from %.10g to %.10g at iteration %d",
                           spec.fmt, trace[-1], loglik, iterations)
        curr = IterationRecord(loglik, _combined_norm(state))
        trace.append(loglik)
        norms.append(curr.norm)
        logger.debug("iter %4d  loglik=%.10g  norm=%.8g", iterations, loglik, curr.norm)
        decision = convergence_check(prev, curr, spec)
        prev = curr
        if decision:
            converged = True
            logger.debug("converged on %s criterion", decision.reason)
            break

    if not converged:
        msg = f"{spec.fmt} fit did not converge in {spec.max_iter} iterations"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    coeff = _finalize(state)
    intercept = y_mean.array - partial_predict(coeff, x_mean.array[None])[0]
    logger.info("%s fit ranks=%s: %d iterations, converged=%s, loglik=%.8g",
                spec.fmt, ranks, iterations, converged, trace[-1])
    return ToTRFit(
        coeff=coeff,
        intercept=DenseTensor(intercept if spec.intercept else np.zeros(resp_dims)),
        scales=tuple(state.scales),
        sigma2=state.sigma2,
        loglik_trace=tuple(trace),
        converged=converged,
        iterations=iterations,
        spec=spec,
        n=n,
        norm_trace=tuple(norms),
        block_times=dict(times),
        rhos=tuple(state.rhos),
    )


# ==============================================================================
# PREDICTION
# ==============================================================================

def predict_stack(fit: ToTRFit, X) -> np.ndarray:
    xs = as_stack(X, "covariates")
    if xs.shape[1:] != fit.covariate_dims:
        raise TensorShapeError(f"covariates have dims {xs.shape[1:]}, fit expects {fit.covariate_dims}")
    return fit.intercept.array[None] + partial_predict(fit.coeff, xs)


def predict(fit: ToTRFit, X) -> list[DenseTensor]:
    """Y_hat_i = U_hat + <X_i | B_hat>, contracted factor-wise."""
    return [DenseTensor(y) for y in predict_stack(fit, X)]


def residuals(fit: ToTRFit, X, Y) -> list[DenseTensor]:
    ys = as_stack(Y, "responses")
    pred = predict_stack(fit, X)
    if ys.shape != pred.shape:
        raise TensorShapeError(f"responses have shape {ys.shape}, predictions {pred.shape}")
    return [DenseTensor(r) for r in ys - pred]


def state_from_fit(fit: ToTRFit, X, Y=None) -> FitState:
    """Working state holding a fitted coefficient, for design and information computations.

    Covariates are centered when the fit profiled an intercept; CP weights are
    folded into the last response factor.
    """
    xs = as_stack(X, "covariates")
    intercept = fit.spec.intercept if fit.spec is not None else True
    if intercept:
        xs = xs - xs.mean(axis=0)
    ys = None
    if Y is not None:
        ys = as_stack(Y, "responses")
        if intercept:
            ys = ys - ys.mean(axis=0)
    coeff = fit.coeff
    models = fit.spec.resolved_scale_models(len(fit.scales)) if fit.spec is not None else \
        (ScaleModel("unstructured"),) * len(fit.scales)
    state = FitState(X=xs, Y=ys, fmt=coeff.fmt, scale_models=tuple(models),
                     scales=[np.array(s) for s in fit.scales], sigma2=fit.sigma2,
                     rhos=list(fit.rhos) or [None] * len(fit.scales))
    _load_coeff(state, coeff)
    return state


# ==============================================================================
# FIT ARTIFACTS
# ==============================================================================

SUMMARY = "summary.json"
TRACE = "loglik_trace.csv"
TIMINGS = "timings.json"


def save_fit(fit: ToTRFit, directory) -> Path:
    """Coefficient manifest and factors, intercept, scales, trace CSV and a JSON summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_coeff(fit.coeff, directory / "coeff")
    write_tensor(directory / "intercept.dten", fit.intercept)
    for k, s in enumerate(fit.scales, start=1):
        write_tensor(directory / f"scale_{k}.dten", s)
    norms = fit.norm_trace or (float("nan"),) * len(fit.loglik_trace)
    write_table(directory / TRACE, ["iteration", "loglik", "norm"],
                [(i, ll, nm) for i, (ll, nm) in enumerate(zip(fit.loglik_trace, norms), start=1)])
    summary = {
        "format": fit.coeff.fmt,
        "ranks": list(fit.coeff.ranks),
        "n": fit.n,
        "sigma2": fit.sigma2,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "scales": len(fit.scales),
        "rhos": list(fit.rhos),
        "spec": fit.spec.to_config() if fit.spec is not None else None,
    }
    path = directory / SUMMARY
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    # wall-clock, kept apart so the summary is reproducible
    with open(directory / TIMINGS, "w", encoding="utf-8") as f:
        json.dump(fit.block_times, f, indent=2)
    return path


def load_fit(directory) -> ToTRFit:
    directory = Path(directory)
    try:
        with open(directory / SUMMARY, "r", encoding="utf-8") as f:
            summary = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"cannot read fit summary in {directory}: {exc}") from exc
    _, rows = read_table(directory / TRACE)
    spec = summary.get("spec")
    return ToTRFit(
        coeff=load_coeff(directory / "coeff"),
        intercept=read_tensor(directory / "intercept.dten"),
        scales=tuple(read_tensor(directory / f"scale_{k}.dten").array
                     for k in range(1, summary["scales"] + 1)),
        sigma2=float(summary["sigma2"]),
        loglik_trace=tuple(float(r[1]) for r in rows),
        converged=bool(summary["converged"]),
        iterations=int(summary["iterations"]),
        spec=ToTRSpec.from_config(spec) if spec else None,
        n=int(summary["n"]),
        norm_trace=tuple(float(r[2]) for r in rows),
        block_times=_read_timings(directory),
        rhos=tuple(summary.get("rhos", [])),
    )


def _read_timings(directory):
    try:
        with open(directory / TIMINGS, "r", encoding="utf-8") as f:
            return dict(json.load(f))
    except (OSError, json.JSONDecodeError):
        return {}
