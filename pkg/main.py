"""
tensorreg command line
======================

Every run is driven by one JSON config (see README.md) and writes only under
its output directory.

Subcommands:
- fit                    : fit a ToTR model to x/y tensor files, write the fit artifacts
- simulate               : draw a dataset from a low-rank truth
- rank-search            : BIC over a grid of rank candidates
- tanova                 : Wilks' Lambda for "factor k has no effect", with a
                           parametric-bootstrap null quantile and p-value
- bench                  : seconds per iteration against n and m_1
- experiment consistency : estimation error against sample size
- experiment wilks       : Monte-Carlo Lambda quantiles against noise level

Exit codes: 0 success, 1 usage/data error, 2 non-convergence.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tensorreg.config import RUNTIME, load_config
from tensorreg.errors import ConfigError, TensorRegError
from tensorreg.estimation import fit, save_fit, spec_from_config
from tensorreg.experiments import (
    FittedModelGenerator,
    bench,
    bootstrap_pvalue,
    experiment_consistency,
    experiment_wilks,
)
from tensorreg.inference import asymptotic_law, marginal_pvalues, standardize
from tensorreg.lowrank import to_full
from tensorreg.modelselect import (
    RankGrid,
    build_tanova_design,
    rank_search,
    reduced_design,
    reduced_ranks,
    tanova_fits,
    wilks_mc_values,
)
from tensorreg.simulate import read_dataset, read_labels, simulate_from_config, write_dataset
from tensorreg.tensor_io import load_tensor, write_table

logger = logging.getLogger("tensorreg.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

CONSISTENCY_KEYS = ("replicates", "multipliers", "formats")
WILKS_KEYS = ("sigmas", "replicates_per_cell", "B", "level", "formats", "max_iter")


# ==============================================================================
# HELPERS
# ==============================================================================

def _config(args, required=True):
    if args.config is None:
        if required:
            raise ConfigError(f"'{args.command}' needs --config")
        return {}
    return load_config(args.config)


def _out_dir(args) -> Path:
    out = Path(args.out or RUNTIME["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg):
    if args.seed is not None:
        return args.seed
    return cfg.get("model", {}).get("seed", 0)


def _data_path(args, cfg, key, override=None):
    """Data file from the command line, else from the config (relative to the config file)."""
    if override is not None:
        return Path(override)
    value = cfg.get("data", {}).get(key)
    if value is None:
        raise ConfigError(f"data.{key} is required")
    path = Path(value)
    return path if path.is_absolute() else Path(args.config).parent / path


def _model_spec(args, cfg, **defaults):
    if "model" not in cfg:
        raise ConfigError("model section is required")
    section = {**defaults, **cfg["model"]}
    if args.seed is not None:
        section["seed"] = args.seed
    return spec_from_config(section)


def _report(tag, message):
    print(f"[{tag}] {message}")


# ==============================================================================
# SUBCOMMANDS
# ==============================================================================

def cmd_fit(args):
    cfg = _config(args)
    spec = _model_spec(args, cfg)
    X, Y = read_dataset(_data_path(args, cfg, "x", args.x), _data_path(args, cfg, "y", args.y))
    result = fit(spec, X, Y)
    out = _out_dir(args)
    save_fit(result, out)
    _report("fit", f"{spec.fmt} ranks={list(result.coeff.ranks)} n={result.n} "
                   f"loglik={result.loglik:.8g} iterations={result.iterations} converged={result.converged}")
    _report("fit", f"artifacts written to {out}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    cfg = _config(args)
    data = simulate_from_config(cfg, seed=_seed(args, cfg))
    out = write_dataset(data, _out_dir(args))
    _report("simulate", f"n={data.X.shape[0]} X{data.X.shape[1:]} -> Y{data.Y.shape[1:]} written to {out}")
    return EXIT_OK


def cmd_rank_search(args):
    cfg = _config(args)
    spec = _model_spec(args, cfg)
    if "grid" not in cfg:
        raise ConfigError("rank-search needs a 'grid' section")
    X, Y = read_dataset(_data_path(args, cfg, "x", args.x), _data_path(args, cfg, "y", args.y))
    result = rank_search(spec, RankGrid(spec.fmt, cfg["grid"]), X, Y, jobs=args.jobs)
    out = _out_dir(args)
    write_table(out / "bic.csv", ["ranks", "k", "loglik", "bic", "converged", "error"],
                [(r.ranks, r.k, r.loglik, r.bic, r.converged, r.error or "") for r in result.table])
    save_fit(result.best, out / "best")
    _report("rank-search", f"{len(result.table)} candidates, best ranks {list(result.best_ranks)}")
    return EXIT_OK if result.best.converged else EXIT_NOT_CONVERGED


def cmd_tanova(args):
    cfg = _config(args)
    # centered indicators are singular, so TANOVA fits default to no intercept
    spec = _model_spec(args, cfg, intercept=False)
    opts = cfg.get("tanova", {})
    drop_mode = int(opts.get("drop_mode", 1))
    n_boot = int(opts.get("B", 200))
    level = float(opts.get("level", 0.95))

    y = load_tensor(_data_path(args, cfg, "y", args.y)).array
    Y = np.moveaxis(y, -1, 0)
    labels = read_labels(_data_path(args, cfg, "labels"))
    levels = cfg.get("data", {}).get("levels") or labels.max(axis=0).tolist()
    design, X_full = build_tanova_design(levels, labels)
    if design.n != Y.shape[0]:
        raise ConfigError(f"{design.n} label rows but {Y.shape[0]} responses (last mode of y)")
    X_red = reduced_design(design, drop_mode).covariates()

    red_spec = replace(spec, ranks=reduced_ranks(spec.fmt, spec.ranks, drop_mode))
    full, reduced, observed = tanova_fits(spec, red_spec, X_full, X_red, Y)
    _report("tanova", f"Lambda = {observed:.6g} (factor {drop_mode} dropped)")

    generator = FittedModelGenerator(reduced, X_full, X_red)
    values = wilks_mc_values(spec, red_spec, generator, n_boot, seed=_seed(args, cfg), jobs=args.jobs)
    quantile = float(np.quantile(values, level))
    pvalue = bootstrap_pvalue(observed, values)

    out = _out_dir(args)
    write_table(out / "tanova.csv", ["drop_mode", "lambda", "level", "mc_quantile", "mc_pvalue", "B"],
                [(drop_mode, observed, level, quantile, pvalue, n_boot)])
    write_table(out / "wilks_bootstrap.csv", ["replicate", "lambda"],
                [(b, float(v)) for b, v in enumerate(values, start=1)])
    save_fit(full, out / "full")
    save_fit(reduced, out / "reduced")
    if opts.get("marginal", False):
        law = asymptotic_law(full, X_full)
        z = standardize(to_full(full.coeff).array, law)
        write_table(out / "marginal_pvalues.csv", ["index", "z", "pvalue"], marginal_pvalues(z.array))
    _report("tanova", f"q{level:.2f} = {quantile:.6g}, Monte-Carlo p = {pvalue:.4g} over B={n_boot}")
    return EXIT_OK if full.converged and reduced.converged else EXIT_NOT_CONVERGED


def cmd_bench(args):
    cfg = _config(args, required=False)
    opts = dict(cfg.get("bench", {}))
    if "format" in opts:
        opts["fmt"] = opts.pop("format")
    for key in ("ranks", "covariate_dims", "response_dims", "ns", "m1s"):
        if key in opts:
            opts[key] = tuple(opts[key])
    result = bench(_out_dir(args), seed=_seed(args, cfg), **opts)
    _report("bench", f"slope vs n = {result.slope_n:.3f}, slope vs m1 = {result.slope_m1:.3f}")
    return EXIT_OK


def cmd_experiment(args):
    cfg = _config(args, required=False)
    keys = CONSISTENCY_KEYS if args.name == "consistency" else WILKS_KEYS
    opts = {k: v for k, v in cfg.get("experiment", {}).items() if k in keys}
    for key in ("multipliers", "sigmas", "formats"):
        if key in opts:
            opts[key] = tuple(opts[key])
    out = _out_dir(args)
    seed = _seed(args, cfg)
    _report("experiment", f"running {args.name} (seed {seed})")
    if args.name == "consistency":
        rows = experiment_consistency(out, seed=seed, jobs=args.jobs, **opts)
    else:
        rows = experiment_wilks(out, seed=seed, jobs=args.jobs, **opts)
    _report("experiment", f"{len(rows)} rows written to {out}")
    return EXIT_OK


# ==============================================================================
# ENTRY POINT
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help=f"output directory (default: {RUNTIME['out_dir']})")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=None, help="worker processes, -1 = all cores")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="tensorreg", description="Tensor-on-tensor regression and TANOVA")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, help_text in (
        ("fit", cmd_fit, "fit a model to x/y tensor files"),
        ("rank-search", cmd_rank_search, "BIC rank search"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--x", help="covariate file, observations in the last mode")
        p.add_argument("--y", help="response file, observations in the last mode")
        p.set_defaults(handler=handler)

    p = sub.add_parser("tanova", parents=[common], help="Wilks' Lambda test for one factor")
    p.add_argument("--y", help="response file, observations in the last mode")
    p.set_defaults(handler=cmd_tanova)

    sub.add_parser("simulate", parents=[common], help="simulate a dataset").set_defaults(handler=cmd_simulate)
    sub.add_parser("bench", parents=[common], help="timing per iteration").set_defaults(handler=cmd_bench)

    p = sub.add_parser("experiment", parents=[common], help="desk-scale experiments")
    p.add_argument("name", choices=("consistency", "wilks"))
    p.set_defaults(handler=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else RUNTIME["log_level"].upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (TensorRegError, OSError, ValueError) as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"[tensorreg] error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
