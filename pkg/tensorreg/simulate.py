"""
Synthetic data
==============

Draws datasets from Y_i = U + <X_i | B> + E_i with a known low-rank B.

Scale generators:
- wishart: W_m(m, I) draw divided by its (1,1) entry
- ar1 / equicorr: correlation matrices with a given rho
- identity

Dataset files keep observations in the LAST mode: x.dten has dims
(h_1..h_l, n) and y.dten has dims (m_1..m_p, n).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import wishart

from tensorreg.covariance import ScaleModel
from tensorreg.errors import ConfigError, TensorShapeError
from tensorreg.lowrank import LowRankCoeff, partial_predict, random_coeff, save_coeff
from tensorreg.modelselect import TanovaDesign, build_tanova_design
from tensorreg.tensor_io import load_tensor, write_table, write_tensor
from tensorreg.tvn import TvnParams, sample_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    X: np.ndarray
    Y: np.ndarray
    coeff: LowRankCoeff
    intercept: np.ndarray
    scales: tuple[np.ndarray, ...]
    sigma2: float
    design: TanovaDesign | None = None


# ==============================================================================
# SCALES AND DESIGNS
# ==============================================================================

def wishart_scale(m, rng) -> np.ndarray:
    """W_m(m, I) draw normalized so that entry (1,1) is 1."""
    draw = np.atleast_2d(wishart(df=m, scale=np.eye(m)).rvs(random_state=rng))
    return draw / draw[0, 0]


def make_scale(generator, m, rng) -> np.ndarray:
    kind = generator.get("kind", "identity")
    if kind == "wishart":
        return wishart_scale(m, rng)
    if kind in ("ar1", "equicorr"):
        return ScaleModel(kind).matrix(m, generator.get("rho", 0.0))
    if kind == "identity":
        return np.eye(m)
    raise ConfigError(f"unknown scale generator '{kind}'")


def gaussian_design(n, covariate_dims, rng) -> np.ndarray:
    return rng.standard_normal((n,) + tuple(covariate_dims))


def cell_design(levels, replicates_per_cell):
    """Balanced TANOVA layout, every cell repeated `replicates_per_cell` times (first factor fastest)."""
    cells = np.array(np.unravel_index(np.arange(int(np.prod(levels))), levels, order="F")).T + 1
    labels = np.repeat(cells, replicates_per_cell, axis=0)
    return build_tanova_design(levels, labels)


def smooth_images(groups, colors, rows, cols, rng, distinct=True, bumps=3) -> np.ndarray:
    """Coefficient (groups, colors, rows, cols) of smooth Gaussian-bump images.

    With `distinct=False` every group shares the first group's images.
    """
    r = np.linspace(0.0, 1.0, rows)[:, None]
    c = np.linspace(0.0, 1.0, cols)[None, :]

    def image():
        img = np.zeros((rows, cols))
        for _ in range(bumps):
            cr, cc = rng.uniform(0.2, 0.8, size=2)
            width = rng.uniform(0.1, 0.25)
            img += rng.uniform(1.0, 3.0) * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * width ** 2))
        return img

    shapes = [image() for _ in range(groups if distinct else 1)]
    tint = rng.uniform(0.5, 1.5, size=colors)
    out = np.empty((groups, colors, rows, cols))
    for g in range(groups):
        for k in range(colors):
            out[g, k] = tint[k] * shapes[g if distinct else 0]
    return out


# ==============================================================================
# SIMULATION
# ==============================================================================

def simulate_totr(coeff, X, scales, sigma2, rng, intercept=None) -> np.ndarray:
    """Y stack U + <X_i | B> + E_i with E_i ~ TVN(0, sigma2 Sigma); `coeff` may be a dense array."""
    if isinstance(coeff, np.ndarray):
        mean = _dense_predict(coeff, X)
    else:
        mean = partial_predict(coeff, X)
    if intercept is not None:
        mean = mean + np.asarray(intercept)[None]
    params = TvnParams(np.zeros(mean.shape[1:]), scales, sigma2)
    return mean + sample_array(params, X.shape[0], rng)


def _dense_predict(b, X):
    l = X.ndim - 1
    return np.tensordot(X, b, axes=(list(range(1, l + 1)), list(range(l))))


def simulate_from_config(cfg, seed=0) -> SimulatedData:
    """Draw a dataset from the `truth` and `design` sections of an experiment config."""
    truth = cfg.get("truth")
    if truth is None:
        raise ConfigError("simulate needs a 'truth' section")
    design_cfg = cfg.get("design", {"kind": "gaussian", "n": 100})
    rng = np.random.default_rng(seed)
    response_dims = tuple(truth["response_dims"])

    design = None
    if design_cfg.get("kind", "gaussian") == "tanova":
        design, X = cell_design(tuple(design_cfg["levels"]), design_cfg.get("replicates_per_cell", 1))
        covariate_dims = design.levels
    else:
        if "covariate_dims" not in truth:
            raise ConfigError("truth.covariate_dims is required for a gaussian design")
        covariate_dims = tuple(truth["covariate_dims"])
        X = gaussian_design(design_cfg.get("n", 100), covariate_dims, rng)

    fmt = truth.get("format", "cp")
    coeff = random_coeff(fmt, covariate_dims, response_dims, truth.get("ranks"), seed=rng)
    gens = truth.get("scales") or [{"kind": "identity"}] * len(response_dims)
    if len(gens) != len(response_dims):
        raise ConfigError(f"truth.scales has {len(gens)} generators for {len(response_dims)} response modes")
    scales = tuple(make_scale(g, m, rng) for g, m in zip(gens, response_dims))
    sigma2 = float(truth.get("sigma2", 1.0))
    intercept = rng.uniform(size=response_dims) if truth.get("intercept", False) else np.zeros(response_dims)
    Y = simulate_totr(coeff, X, scales, sigma2, rng, intercept)
    logger.info("simulated n=%d observations, %s -> %s, format %s", X.shape[0], covariate_dims, response_dims, fmt)
    return SimulatedData(X, Y, coeff, intercept, scales, sigma2, design)


# ==============================================================================
# DATASET FILES
# ==============================================================================

def _last_mode(stack):
    return np.moveaxis(stack, 0, -1)


def write_dataset(data: SimulatedData, directory) -> Path:
    """x.dten, y.dten (observations last), labels.csv for TANOVA designs, and the truth."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "x.dten", _last_mode(data.X))
    write_tensor(directory / "y.dten", _last_mode(data.Y))
    if data.design is not None:
        write_table(directory / "labels.csv", [f"factor_{j + 1}" for j in range(len(data.design.levels))],
                    [tuple(int(v) for v in row) for row in data.design.labels])
    truth_dir = directory / "truth"
    save_coeff(data.coeff, truth_dir / "coeff")
    write_tensor(truth_dir / "intercept.dten", data.intercept)
    for k, s in enumerate(data.scales, start=1):
        write_tensor(truth_dir / f"scale_{k}.dten", s)
    with open(truth_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump({"sigma2": data.sigma2, "n": int(data.X.shape[0]), "scales": len(data.scales),
                   "levels": list(data.design.levels) if data.design is not None else None}, f, indent=2)
    return directory


def read_dataset(x_path, y_path):
    """(X stack, Y stack) from files whose last mode indexes observations."""
    x = load_tensor(x_path).array
    y = load_tensor(y_path).array
    if x.shape[-1] != y.shape[-1]:
        raise TensorShapeError(
            f"observation axis (last mode) differs: {x_path} has {x.shape[-1]}, {y_path} has {y.shape[-1]}"
        )
    return np.moveaxis(x, -1, 0), np.moveaxis(y, -1, 0)


def read_labels(path) -> np.ndarray:
    """Integer label table (n x l) written by `write_dataset`, header row skipped."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows.astype(np.int64)
