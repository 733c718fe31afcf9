"""
Configuration
=============

Two layers:

- Environment defaults, read once from the process environment (and from a
  `.env` file when present) into the FIT_DEFAULTS, BUDGETS and RUNTIME dicts.
- Experiment configs: one JSON document per CLI run, validated in full by
  `load_config` before any computation starts.

Environment variables:
- TENSORREG_MAX_ITER, TENSORREG_TOL_REL, TENSORREG_TOL_ABS, TENSORREG_TOL_NORM
- TENSORREG_DENSE_BUDGET, TENSORREG_COV_BUDGET
- TENSORREG_JOBS, TENSORREG_OUT_DIR, TENSORREG_LOG_LEVEL
"""

import json
import os
from pathlib import Path

from dotenv import load_dotenv

from tensorreg.errors import ConfigError

load_dotenv()

# ==============================================================================
# ENVIRONMENT DEFAULTS
# ==============================================================================

FIT_DEFAULTS = {
    "max_iter":    int(os.getenv("TENSORREG_MAX_ITER", "500")),
    "tol_rel":     float(os.getenv("TENSORREG_TOL_REL", "1e-6")),   # relative part of tol_loglik
    "tol_abs":     float(os.getenv("TENSORREG_TOL_ABS", "1e-8")),   # absolute part of tol_loglik
    "tol_norm":    float(os.getenv("TENSORREG_TOL_NORM", "1e-6")),
    "rank_tol":    1e-10,                                           # pivoted-QR rank threshold
}

BUDGETS = {
    "dense_elements":     int(float(os.getenv("TENSORREG_DENSE_BUDGET", "1e8"))),
    "covariance_entries": int(float(os.getenv("TENSORREG_COV_BUDGET", "4e6"))),
    "explicit_matrix":    10_000,   # commutation/duplication matrices, per side
}

RUNTIME = {
    "jobs":      int(os.getenv("TENSORREG_JOBS", "1")),
    "out_dir":   os.getenv("TENSORREG_OUT_DIR", "output"),
    "log_level": os.getenv("TENSORREG_LOG_LEVEL", "INFO"),
}

# ==============================================================================
# EXPERIMENT CONFIG SCHEMA
# ==============================================================================

FORMATS = ("tucker", "cp", "op", "tr")
SCALE_KINDS = ("unstructured", "ar1", "equicorr", "identity")
SCALE_ALIASES = {"equicorrelation": "equicorr"}

MODEL_KEYS = {
    "format":       str,
    "ranks":        (list, int, type(None)),
    "scale_models": (list, type(None)),
    "intercept":    bool,
    "max_iter":     int,
    "tol_loglik":   (float, int, type(None)),
    "tol_norm":     (float, int),
    "seed":         int,
    "allow_pinv":   bool,
}

SECTIONS = ("model", "data", "truth", "design", "grid", "experiment", "bench", "tanova")

DATA_KEYS = ("x", "y", "labels", "levels")
EXPERIMENT_KEYS = ("replicates", "multipliers", "formats", "sigmas", "replicates_per_cell", "B", "level", "max_iter")
BENCH_KEYS = ("format", "ranks", "covariate_dims", "response_dims", "ns", "m1s", "iterations")
TANOVA_KEYS = ("drop_mode", "B", "level", "marginal")


def normalize_scale_kind(kind):
    """Map a config scale-model name onto its canonical kind."""
    name = str(kind).strip().lower()
    name = SCALE_ALIASES.get(name, name)
    if name not in SCALE_KINDS:
        raise ConfigError(f"unknown scale model '{kind}' (expected one of {', '.join(SCALE_KINDS)})")
    return name


def _check_type(path, value, expected):
    allowed = expected if isinstance(expected, tuple) else (expected,)
    # bool is an int subclass
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{path}: expected {expected}, got a boolean")
    if not isinstance(value, expected):
        raise ConfigError(f"{path}: expected {expected}, got {type(value).__name__}")


def validate_model_section(section, path="model"):
    """Validate a `model` section in place and return it.

    Args:
        section: Parsed JSON object.
        path: Key path used in error messages.

    Returns:
        The same dict, with scale-model names canonicalised.
    """
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(section) - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if "format" not in section:
        raise ConfigError(f"{path}.format is required")
    for key, expected in MODEL_KEYS.items():
        if key in section:
            _check_type(f"{path}.{key}", section[key], expected)

    fmt = section["format"].lower()
    if fmt not in FORMATS:
        raise ConfigError(f"{path}.format: '{section['format']}' is not one of {FORMATS}")
    section["format"] = fmt

    ranks = section.get("ranks")
    if isinstance(ranks, list):
        if not all(isinstance(r, int) and not isinstance(r, bool) and r >= 1 for r in ranks):
            raise ConfigError(f"{path}.ranks: entries must be positive integers")
    elif isinstance(ranks, int) and ranks < 1:
        raise ConfigError(f"{path}.ranks: must be positive")
    if fmt != "op" and ranks is None:
        raise ConfigError(f"{path}.ranks is required for format '{fmt}'")

    if section.get("scale_models") is not None:
        section["scale_models"] = [normalize_scale_kind(k) for k in section["scale_models"]]
    for key in ("tol_loglik", "tol_norm"):
        value = section.get(key)
        if value is not None and value <= 0:
            raise ConfigError(f"{path}.{key}: must be positive")
    if section.get("max_iter", 1) < 1:
        raise ConfigError(f"{path}.max_iter: must be at least 1")
    return section


def _check_dims(path, dims):
    if not isinstance(dims, list) or not dims:
        raise ConfigError(f"{path}: expected a non-empty list of mode sizes")
    if not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims):
        raise ConfigError(f"{path}: mode sizes must be positive integers")


def validate_config(cfg):
    """Validate a whole experiment document. Raises ConfigError on the first problem."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")

    if "model" in cfg:
        validate_model_section(cfg["model"])

    truth = cfg.get("truth")
    if truth is not None:
        if not isinstance(truth, dict):
            raise ConfigError("truth: expected an object")
        _check_dims("truth.response_dims", truth.get("response_dims"))
        if "covariate_dims" in truth:
            _check_dims("truth.covariate_dims", truth["covariate_dims"])
        if truth.get("sigma2", 1.0) < 0:
            raise ConfigError("truth.sigma2: must be nonnegative")
        for i, gen in enumerate(truth.get("scales", [])):
            if not isinstance(gen, dict) or "kind" not in gen:
                raise ConfigError(f"truth.scales[{i}]: expected an object with a 'kind'")
            if gen["kind"] not in ("wishart", "ar1", "equicorr", "identity"):
                raise ConfigError(f"truth.scales[{i}].kind: unknown generator '{gen['kind']}'")

    design = cfg.get("design")
    if design is not None:
        if not isinstance(design, dict):
            raise ConfigError("design: expected an object")
        kind = design.get("kind", "gaussian")
        if kind not in ("gaussian", "tanova"):
            raise ConfigError(f"design.kind: unknown design '{kind}'")
        if kind == "tanova":
            _check_dims("design.levels", design.get("levels"))
        n = design.get("n", design.get("replicates_per_cell", 1))
        if not isinstance(n, int) or n < 1:
            raise ConfigError("design.n / design.replicates_per_cell: must be a positive integer")

    grid = cfg.get("grid")
    if grid is not None:
        if not isinstance(grid, list) or not grid:
            raise ConfigError("grid: expected a non-empty list of rank candidates")

    tanova = cfg.get("tanova")
    if tanova is not None:
        if not isinstance(tanova, dict) or "drop_mode" not in tanova:
            raise ConfigError("tanova: expected an object with 'drop_mode'")
        if not isinstance(tanova["drop_mode"], int) or tanova["drop_mode"] < 1:
            raise ConfigError("tanova.drop_mode: must be a positive integer")

    for name, keys in (("data", DATA_KEYS), ("experiment", EXPERIMENT_KEYS), ("bench", BENCH_KEYS),
                       ("tanova", TANOVA_KEYS)):
        section = cfg.get(name)
        if section is None:
            continue
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected an object")
        unknown = set(section) - set(keys)
        if unknown:
            raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")

    return cfg


def load_config(path):
    """Read and validate a JSON experiment config.

    Args:
        path: Path to the JSON document.

    Returns:
        The validated config dict.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return validate_config(cfg)
