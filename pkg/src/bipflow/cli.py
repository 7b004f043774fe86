"""Experiment runner: TOML configuration, method dispatch, CSV/JSON export.

``bipflow run config.toml [--set key=value ...] [--threads n] [--out dir]``
builds the configured inverse problem, draws the initial ensemble from the
prior with the configured seed, dispatches to the configured method, and
writes:

* ``meta.json`` - resolved configuration, truth/data echo, version, timing;
* ``diagnostics.csv`` - ``t,potential,spread,cov_trace[,ess]`` time series;
* ``particles_initial.csv`` / ``particles_final.csv`` - ``x_1..x_n`` rows;
* ``samples.csv`` - posterior samples, with a ``weight`` column where the
  method produces weighted samples;
* ``error.json`` instead of the result files when the computation fails.

Identical configuration and seed produce byte-identical CSV bodies.  Exit
codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, benchmarks
from .density import evaluate_log_density_grid, write_grid_csv
from .exceptions import BipflowError, ConfigurationError
from .flows import FokkerPlanckFlow
from .langevin import LangevinSampler
from .smc import PCNSampler, TemperedSMC

PROBLEM_TYPES = ("linear_gaussian", "elliptic2d", "bimodal", "kl_linear", "darcy1d")
METHOD_TYPES = ("fp_flow", "langevin", "smc", "pcn")


# -- configuration handling --------------------------------------------------

_DEFAULTS = {
    "problem": {"type": "bimodal"},
    "method": {
        "type": "fp_flow",
        "preconditioner": "global_covariance",
        "gradient_mode": "exact",
        "kind": "corrected",
    },
    "kernel": {
        "family": "gaussian",
        "bandwidth_mode": "fixed_prior",
        "alpha": 0.05,
        "freeze_time": None,
    },
    "localisation": {"gamma": 1.0, "metric": "prior"},
    "integrator": {
        "rel_tol": 1e-3,
        "abs_tol": 1e-6,
        "t_end": 10.0,
        "max_steps": 200_000,
        "record_stride": 1,
    },
    "step": {
        "dt": None,
        "safety": 0.1,
        "dt_max": 0.1,
        "t_end": 1.0,
        "burn_in": 0.0,
        "thin_stride": 10,
        "record_stride": 10,
    },
    "smc": {
        "n_stages": 250,
        "stage_duration": 0.002,
        "ess_threshold": None,
        "resampling": "multinomial",
    },
    "pcn": {"step_size": 0.07, "n_steps": 10_000, "burn_in": 0, "thin": 1},
    "output": {"samples_per_particle": 5, "grid_points": 0},
    "run": {"particles": 100, "seed": 0, "output_dir": "out"},
}

_PROBLEM_KEYS = {
    "linear_gaussian": {"mean", "cov"},
    "elliptic2d": set(),
    "bimodal": set(),
    "kl_linear": {"n_modes", "n_obs", "tau", "noise_variance", "seed"},
    "darcy1d": {
        "n_modes",
        "n_obs",
        "tau",
        "level",
        "noise_variance",
        "seed",
        "n_truth_modes",
    },
}


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def parse_override(text: str):
    """Split a ``section.key=value`` override, TOML-parsing the value."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if "." not in key:
        raise ConfigurationError(f"override key {key!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def resolve_config(raw: dict, overrides=()) -> dict:
    """Merge defaults, file values, and overrides; validate every field."""
    config = {section: dict(values) for section, values in _DEFAULTS.items()}
    for section, values in raw.items():
        if section not in config:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigurationError(f"section [{section}] must be a table")
        for key, value in values.items():
            if key not in config[section] and not (
                section == "problem" and key in _PROBLEM_KEYS.get(values.get("type", ""), set())
            ):
                known = set(config[section]) | (
                    _PROBLEM_KEYS.get(values.get("type", ""), set())
                    if section == "problem"
                    else set()
                )
                raise ConfigurationError(
                    f"unknown key {section}.{key}; known keys: {sorted(known)}"
                )
            config[section][key] = value
    for text in overrides:
        key, value = parse_override(text)
        section, name = key.split(".", 1)
        if section not in config:
            raise ConfigurationError(f"override targets unknown section [{section}]")
        config[section][name] = value
    _validate_config(config)
    return config


def _require(condition, message):
    if not condition:
        raise ConfigurationError(message)


def _validate_config(config):
    problem = config["problem"]
    _require(
        problem["type"] in PROBLEM_TYPES,
        f"problem.type must be one of {PROBLEM_TYPES}, got {problem['type']!r}",
    )
    extras = set(problem) - {"type"} - _PROBLEM_KEYS[problem["type"]]
    _require(not extras, f"problem keys {sorted(extras)} not valid for {problem['type']}")

    method = config["method"]
    _require(
        method["type"] in METHOD_TYPES,
        f"method.type must be one of {METHOD_TYPES}, got {method['type']!r}",
    )

    run = config["run"]
    _require(int(run["particles"]) >= 1, "run.particles must be >= 1")
    _require(isinstance(run["seed"], int), "run.seed must be an integer")

    integ = config["integrator"]
    for key in ("rel_tol", "abs_tol", "t_end"):
        _require(float(integ[key]) > 0, f"integrator.{key} must be positive")
    step = config["step"]
    _require(float(step["t_end"]) > 0, "step.t_end must be positive")
    _require(
        0 <= float(step["burn_in"]) < float(step["t_end"]),
        "step.burn_in must lie in [0, step.t_end)",
    )
    if step["dt"] is not None:
        _require(float(step["dt"]) > 0, "step.dt must be positive")
    smc = config["smc"]
    _require(int(smc["n_stages"]) >= 1, "smc.n_stages must be >= 1")
    _require(float(smc["stage_duration"]) > 0, "smc.stage_duration must be positive")
    pcn = config["pcn"]
    _require(0 < float(pcn["step_size"]) <= 1, "pcn.step_size must lie in (0, 1]")
    _require(int(pcn["n_steps"]) >= 1, "pcn.n_steps must be >= 1")
    _require(float(config["localisation"]["gamma"]) > 0, "localisation.gamma must be positive")
    out = config["output"]
    _require(int(out["samples_per_particle"]) >= 1, "output.samples_per_particle must be >= 1")
    _require(int(out["grid_points"]) >= 0, "output.grid_points must be >= 0")


def build_problem(config):
    problem = config["problem"]
    kind = problem["type"]
    kwargs = {k: v for k, v in problem.items() if k != "type"}
    if kind == "linear_gaussian":
        mean = np.asarray(kwargs.pop("mean", [0.0, 0.0]), dtype=float)
        cov = np.asarray(kwargs.pop("cov", np.eye(mean.shape[0]).tolist()), dtype=float)
        return benchmarks.linear_gaussian_problem(mean, cov)
    if kind == "elliptic2d":
        return benchmarks.elliptic2d_problem()
    if kind == "bimodal":
        return benchmarks.bimodal_problem()
    if kind == "kl_linear":
        return benchmarks.kl_linear_problem(**kwargs)
    return benchmarks.darcy1d_problem(**kwargs)


def build_method(config):
    method = config["method"]
    kernel = config["kernel"]
    loc = config["localisation"]
    run = config["run"]
    seed = int(run["seed"])
    if method["type"] == "fp_flow":
        integ = config["integrator"]
        return FokkerPlanckFlow(
            preconditioner=method["preconditioner"],
            gradient_mode=method["gradient_mode"],
            kernel_family=kernel["family"],
            bandwidth_mode=kernel["bandwidth_mode"],
            alpha=float(kernel["alpha"]),
            freeze_time=kernel["freeze_time"],
            gamma=float(loc["gamma"]),
            localisation_metric=loc["metric"],
            n_particles=int(run["particles"]),
            t_end=float(integ["t_end"]),
            rel_tol=float(integ["rel_tol"]),
            abs_tol=float(integ["abs_tol"]),
            max_steps=int(integ["max_steps"]),
            record_stride=int(integ["record_stride"]),
            random_state=seed,
        )
    if method["type"] == "langevin":
        step = config["step"]
        return LangevinSampler(
            kind=method["kind"],
            gamma=float(loc["gamma"]),
            localisation_metric=loc["metric"],
            dt=None if step["dt"] is None else float(step["dt"]),
            safety=float(step["safety"]),
            dt_max=float(step["dt_max"]),
            t_end=float(step["t_end"]),
            burn_in=float(step["burn_in"]),
            thin_stride=int(step["thin_stride"]),
            record_stride=int(step["record_stride"]),
            n_particles=int(run["particles"]),
            random_state=seed,
        )
    if method["type"] == "smc":
        smc = config["smc"]
        step = config["step"]
        threshold = smc["ess_threshold"]
        kind = method["kind"]
        if kind not in ("gradient_free_corrected", "localised_gradient_free_corrected"):
            kind = "gradient_free_corrected"
        return TemperedSMC(
            kind=kind,
            gamma=float(loc["gamma"]),
            localisation_metric=loc["metric"],
            n_stages=int(smc["n_stages"]),
            stage_duration=float(smc["stage_duration"]),
            ess_threshold=None if threshold is None else float(threshold),
            resampling=smc["resampling"],
            safety=float(step["safety"]),
            dt_max=float(step["dt_max"]),
            n_particles=int(run["particles"]),
            random_state=seed,
        )
    pcn = config["pcn"]
    return PCNSampler(
        step_size=float(pcn["step_size"]),
        n_steps=int(pcn["n_steps"]),
        burn_in=int(pcn["burn_in"]),
        thin=int(pcn["thin"]),
        random_state=seed,
    )


# -- run record and serialization --------------------------------------------

@dataclass
class RunRecord:
    """Everything one experiment produced, ready for serialization."""

    config: dict
    metadata: dict
    diagnostics: dict
    particles_initial: np.ndarray
    particles_final: np.ndarray
    samples: np.ndarray
    sample_weights: Optional[np.ndarray] = None
    density_grid: Optional[tuple] = field(default=None, repr=False)


def _fmt(value) -> str:
    return format(float(value), ".17g")


def _write_csv(path, header, columns):
    rows = zip(*columns)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_particles(path, particles, weights=None):
    particles = np.atleast_2d(particles)
    header = [f"x_{k + 1}" for k in range(particles.shape[1])]
    columns = [particles[:, k] for k in range(particles.shape[1])]
    if weights is not None:
        header.append("weight")
        columns.append(np.asarray(weights))
    _write_csv(path, header, columns)


def write_run_record(record: RunRecord, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config": record.config, **record.metadata, "version": __version__}
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=_json_default)
        fh.write("\n")
    diag = record.diagnostics
    header = ["t", "potential", "spread", "cov_trace"]
    columns = [diag["t"], diag["potential"], diag["spread"], diag["cov_trace"]]
    if "ess" in diag:
        header.append("ess")
        columns.append(diag["ess"])
    _write_csv(out_dir / "diagnostics.csv", header, columns)
    _write_particles(out_dir / "particles_initial.csv", record.particles_initial)
    _write_particles(out_dir / "particles_final.csv", record.particles_final)
    _write_particles(out_dir / "samples.csv", record.samples, record.sample_weights)
    if record.density_grid is not None:
        axes, log_density = record.density_grid
        write_grid_csv(out_dir / "density_grid.csv", axes, log_density)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


# -- experiment driver --------------------------------------------------------

def run_experiment(config: dict) -> RunRecord:
    """Build, run, and package one experiment according to a resolved config."""
    problem = build_problem(config)
    estimator = build_method(config)
    run = config["run"]
    seed = int(run["seed"])
    rng = np.random.default_rng(seed)
    method_type = config["method"]["type"]

    start = time.perf_counter()
    if method_type == "pcn":
        x0 = problem.sample_prior(1, rng)[0]
        estimator.fit(problem, x0)
        particles_initial = x0[None, :]
        particles_final = estimator.chain_[-1][None, :]
        samples = estimator.samples_
        weights = None
        n = estimator.chain_.shape[0]
        misfits = problem.misfit_batch(estimator.chain_)
        priors = np.array([problem.prior_term(x) for x in estimator.chain_])
        diagnostics = {
            "t": np.arange(n, dtype=float),
            "potential": misfits + priors,
            "spread": np.full(n, np.nan),
            "cov_trace": np.full(n, np.nan),
        }
        extra_meta = {"acceptance_rate": estimator.acceptance_rate_}
    else:
        particles_initial = problem.sample_prior(int(run["particles"]), rng)
        estimator.fit(problem, particles_initial)
        particles_final = estimator.particles_
        if method_type == "fp_flow":
            diagnostics = {
                "t": estimator.times_,
                "potential": estimator.potentials_,
                "spread": estimator.spreads_,
                "cov_trace": estimator.cov_traces_,
            }
            try:
                density = estimator.posterior_density()
                samples, weights = density.sample(
                    int(config["output"]["samples_per_particle"]), random_state=seed
                )
            except BipflowError:
                samples, weights = particles_final, None
            extra_meta = {"status": estimator.status_, "n_steps": estimator.n_steps_}
        elif method_type == "langevin":
            diagnostics = {
                "t": estimator.times_,
                "potential": np.full(estimator.times_.shape, np.nan),
                "spread": estimator.spreads_,
                "cov_trace": estimator.spreads_,
            }
            samples = (
                estimator.samples_ if estimator.samples_.size else estimator.particles_
            )
            weights = None
            extra_meta = {
                "status": estimator.status_,
                "n_steps": estimator.n_steps_,
                "collapsed": estimator.collapsed_,
            }
        else:  # smc
            stage_t = float(config["smc"]["stage_duration"]) * np.arange(
                1, int(config["smc"]["n_stages"]) + 1, dtype=float
            )
            diagnostics = {
                "t": stage_t,
                "potential": np.full(stage_t.shape, np.nan),
                "spread": estimator.spread_trace_,
                "cov_trace": estimator.spread_trace_,
                "ess": estimator.ess_trace_,
            }
            samples = estimator.particles_
            weights = estimator.weights_
            extra_meta = {"n_resampled": int(estimator.resampled_.sum())}
    wall_time = time.perf_counter() - start

    density_grid = None
    grid_points = int(config["output"]["grid_points"])
    if grid_points > 0 and method_type == "fp_flow" and problem.n_params <= 2:
        density = estimator.posterior_density()
        sd = np.sqrt(np.diag(problem.prior_cov))
        bounds = np.column_stack(
            [problem.prior_mean - 3 * sd, problem.prior_mean + 3 * sd]
        )
        density_grid = evaluate_log_density_grid(density, bounds, grid_points)

    metadata = {
        "problem": problem.name,
        "method": method_type,
        "truth": None if problem.truth is None else problem.truth,
        "observation": problem.observation,
        "wall_time_s": wall_time,
        **extra_meta,
    }
    return RunRecord(
        config=config,
        metadata=metadata,
        diagnostics=diagnostics,
        particles_initial=particles_initial,
        particles_final=particles_final,
        samples=samples,
        sample_weights=weights,
        density_grid=density_grid,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bipflow", description="Interacting particle experiments for inverse problems"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one experiment from a TOML config")
    runp.add_argument("config", help="path to the TOML configuration file")
    runp.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    runp.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    runp.add_argument("--out", default=None, help="output directory (overrides run.output_dir)")
    args = parser.parse_args(argv)

    try:
        raw = load_config(args.config)
        config = resolve_config(raw, args.overrides)
    except (OSError, tomllib.TOMLDecodeError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out if args.out is not None else config["run"]["output_dir"])
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                record = run_experiment(config)
        else:
            record = run_experiment(config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: partial outputs plus error.json
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "error.json", "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), "type": type(exc).__name__}, fh, indent=2)
            fh.write("\n")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2

    write_run_record(record, out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
