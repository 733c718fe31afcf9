"""
Desk-scale experiments
======================

consistency : single-entry 4x5 covariates -> 6x7 responses, Wishart scales,
              sigma2 = 1, n = 20 k for k in (1, 4, 7, 10, 13); Frobenius errors
              of B, sigma2, Sigma_1, Sigma_2 per format
wilks       : 4 groups x 3 colours of smooth 12x14 images, AR(1) scales
              (0.1, -0.1); Monte-Carlo quantiles of Wilks' Lambda for
              "no group effect" under a true and a false null
bench       : seconds per iteration against n and against m_1, with
              log-log slopes
"""

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tensorreg.estimation import ToTRFit, ToTRSpec, fit
from tensorreg.lowrank import random_coeff, to_full
from tensorreg.modelselect import parallel_map, reduced_design, reduced_ranks, wilks_mc_quantile
from tensorreg.simulate import cell_design, gaussian_design, make_scale, simulate_totr, smooth_images
from tensorreg.tensor_io import write_table

logger = logging.getLogger(__name__)

CONSISTENCY_RANKS = {"tucker": (2, 2, 2, 2), "cp": (2,), "tr": (2, 2, 2, 2), "op": ()}
WILKS_RANKS = {"cp": (3,), "tucker": (3, 3, 3, 3), "tr": (2, 2, 2, 2), "op": ()}


def _spec(fmt, ranks, seed, **kwargs):
    return ToTRSpec(fmt, ranks, intercept=False, seed=int(seed), **kwargs)


# ==============================================================================
# CONSISTENCY
# ==============================================================================

def _consistency_replicate(args):
    fmt, ranks, truth, scales, k, rep, seed = args
    rng = np.random.default_rng(seed)
    _, X = cell_design((4, 5), k)
    Y = simulate_totr(truth, X, scales, 1.0, rng)
    result = fit(_spec(fmt, ranks, rng.integers(2 ** 31)), X, Y)
    err_b = (to_full(result.coeff) - to_full(truth)).norm()
    return (
        fmt, X.shape[0], rep,
        float(err_b),
        abs(result.sigma2 - 1.0),
        float(np.linalg.norm(result.scales[0] - scales[0])),
        float(np.linalg.norm(result.scales[1] - scales[1])),
        result.converged,
    )


def experiment_consistency(out_dir=None, replicates=20, multipliers=(1, 4, 7, 10, 13),
                           formats=tuple(CONSISTENCY_RANKS), seed=0, jobs=None):
    """Median estimation errors per format and sample size.

    Returns:
        Rows (format, n, median err_B, median err_sigma2, median err_Sigma1,
        median err_Sigma2).
    """
    tasks = []
    for fi, fmt in enumerate(formats):
        rng = np.random.default_rng([seed, fi])
        ranks = CONSISTENCY_RANKS[fmt]
        truth = random_coeff(fmt, (4, 5), (6, 7), ranks or None, seed=rng)
        scales = (make_scale({"kind": "wishart"}, 6, rng), make_scale({"kind": "wishart"}, 7, rng))
        for k in multipliers:
            for rep in range(replicates):
                tasks.append((fmt, ranks, truth, scales, k, rep, np.random.SeedSequence([seed, fi, k, rep])))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        runs = parallel_map(_consistency_replicate, tasks, jobs)

    summary = []
    for fmt in formats:
        for k in multipliers:
            errs = np.array([r[3:7] for r in runs if r[0] == fmt and r[1] == 20 * k])
            summary.append((fmt, 20 * k) + tuple(float(v) for v in np.median(errs, axis=0)))
            logger.info("consistency %s n=%d: median |B - B_hat| = %.4g", fmt, 20 * k, summary[-1][2])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(out_dir / "consistency_runs.csv",
                    ["format", "n", "replicate", "err_B", "err_sigma2", "err_Sigma1", "err_Sigma2", "converged"],
                    runs)
        write_table(out_dir / "consistency.csv",
                    ["format", "n", "median_err_B", "median_err_sigma2", "median_err_Sigma1", "median_err_Sigma2"],
                    summary)
    return summary


# ==============================================================================
# WILKS
# ==============================================================================

@dataclass(eq=False)
class TanovaGenerator:
    """Picklable generator of (X_full, X_reduced, Y) for a fixed balanced layout."""

    coeff: np.ndarray
    levels: tuple
    replicates_per_cell: int
    scales: tuple
    sigma2: float
    drop_mode: int = 1
    x_full: np.ndarray = field(init=False)
    x_reduced: np.ndarray = field(init=False)

    def __post_init__(self):
        design, self.x_full = cell_design(self.levels, self.replicates_per_cell)
        self.x_reduced = reduced_design(design, self.drop_mode).covariates()

    def __call__(self, rng):
        return self.x_full, self.x_reduced, simulate_totr(self.coeff, self.x_full, self.scales, self.sigma2, rng)


@dataclass(eq=False)
class FittedModelGenerator:
    """Parametric bootstrap from a fitted reduced model, on fixed full and reduced designs."""

    reduced: ToTRFit
    x_full: np.ndarray
    x_reduced: np.ndarray

    def __call__(self, rng):
        fit_ = self.reduced
        y = simulate_totr(fit_.coeff, self.x_reduced, fit_.scales, fit_.sigma2, rng, fit_.intercept.array)
        return self.x_full, self.x_reduced, y


def bootstrap_pvalue(observed, values) -> float:
    """(1 + #{Lambda* <= Lambda}) / (B + 1); small Lambda is evidence against the reduced model."""
    values = np.asarray(values)
    return float((1 + np.sum(values <= observed)) / (values.size + 1))


def experiment_wilks(out_dir=None, sigmas=(2, 4, 6, 8, 10), replicates_per_cell=5, B=200, level=0.95,
                     formats=tuple(WILKS_RANKS), seed=0, jobs=None, max_iter=200):
    """Monte-Carlo `level` quantiles of Lambda for H0: no group effect.

    Returns:
        Rows (format, sigma, hypothesis, quantile), hypothesis in
        {"null_true", "null_false"}.
    """
    rng = np.random.default_rng(seed)
    images = {
        "null_false": smooth_images(4, 3, 12, 14, rng, distinct=True),
        "null_true": smooth_images(4, 3, 12, 14, rng, distinct=False),
    }
    scales = (make_scale({"kind": "ar1", "rho": 0.1}, 12, rng), make_scale({"kind": "ar1", "rho": -0.1}, 14, rng))

    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for fi, fmt in enumerate(formats):
            ranks = WILKS_RANKS[fmt]
            full_spec = _spec(fmt, ranks, seed, max_iter=max_iter)
            reduced_spec = _spec(fmt, reduced_ranks(fmt, ranks, 1), seed, max_iter=max_iter)
            for si, sigma in enumerate(sigmas):
                for hi, hypothesis in enumerate(("null_true", "null_false")):
                    gen = TanovaGenerator(images[hypothesis], (4, 3), replicates_per_cell, scales, float(sigma) ** 2)
                    q = wilks_mc_quantile(full_spec, reduced_spec, gen, B, level, seed=[seed, fi, si, hi], jobs=jobs)
                    rows.append((fmt, float(sigma), hypothesis, q))
                    logger.info("wilks %s sigma=%g %s: q%.2f = %.6g", fmt, sigma, hypothesis, level, q)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(out_dir / "wilks.csv", ["format", "sigma", "hypothesis", "quantile"], rows)
    return rows


# ==============================================================================
# BENCH
# ==============================================================================

@dataclass(frozen=True)
class BenchResult:
    rows: tuple
    slope_n: float
    slope_m1: float


def _time_fit(fmt, ranks, covariate_dims, response_dims, n, iterations, seed):
    rng = np.random.default_rng(seed)
    truth = random_coeff(fmt, covariate_dims, response_dims, ranks or None, seed=rng)
    X = gaussian_design(n, covariate_dims, rng)
    Y = simulate_totr(truth, X, [np.eye(m) for m in response_dims], 1.0, rng)
    spec = ToTRSpec(fmt, ranks, max_iter=iterations, tol_loglik=1e-300, tol_norm=1e-300, seed=seed)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = fit(spec, X, Y)
    total = time.perf_counter() - start
    return total / result.iterations, {k: v / result.iterations for k, v in result.block_times.items()}


def bench(out_dir=None, fmt="cp", ranks=(2,), covariate_dims=(4, 5), response_dims=(24, 28),
          ns=(50, 100, 200, 400), m1s=(12, 24, 48, 96), iterations=10, seed=0) -> BenchResult:
    """Seconds per block-relaxation iteration against n (m fixed) and against m_1 (n fixed)."""
    rows = []
    n_fixed = ns[len(ns) // 2]
    for n in ns:
        per_iter, blocks = _time_fit(fmt, ranks, covariate_dims, response_dims, n, iterations, seed)
        rows.append(("n", n, response_dims[0], per_iter, blocks))
    for m1 in m1s:
        dims = (m1,) + tuple(response_dims[1:])
        per_iter, blocks = _time_fit(fmt, ranks, covariate_dims, dims, n_fixed, iterations, seed)
        rows.append(("m1", n_fixed, m1, per_iter, blocks))

    def slope(axis, col):
        sel = [r for r in rows if r[0] == axis]
        x = np.log([r[col] for r in sel])
        y = np.log([r[3] for r in sel])
        return float(np.polyfit(x, y, 1)[0])

    result = BenchResult(tuple(rows), slope("n", 1), slope("m1", 2))
    logger.info("bench %s: slope vs n = %.3f, slope vs m1 = %.3f", fmt, result.slope_n, result.slope_m1)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = sorted({k for r in rows for k in r[4]})
        write_table(out_dir / "bench.csv", ["axis", "n", "m1", "seconds_per_iter"] + [f"block_{b}" for b in names],
                    [(a, n, m1, t) + tuple(blocks.get(b, 0.0) for b in names) for a, n, m1, t, blocks in rows])
        write_table(out_dir / "bench_slopes.csv", ["axis", "slope"],
                    [("n", result.slope_n), ("m1", result.slope_m1)])
    return result
