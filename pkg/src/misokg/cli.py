"""Command-line front end.

Subcommands
-----------
run        replicated optimization runs, one CSV and one JSON file per replication
aggregate  mean gain and 2-standard-error bands on a common cost grid
hyperfit   fit hyperparameters on an initial design and print them
ckg-eval   print the cost-sensitive KG of every source on a grid of designs

Configuration files are TOML with the sections ``[problem]``, ``[sources]``,
``[kernel]``, ``[acquisition]``, ``[budget]`` and ``[run]``; see the packaged
files under ``misokg/configs`` for every recognized key.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .acquisition import CkgEvaluator, lhs_points
from .bench import BenchmarkProblem, get_problem, problem_from_spec
from .costs import CostNoiseModel
from .loop import (
    RunConfig,
    estimate_cost_noise,
    initialize,
    read_records_csv,
    records_to_csv,
    run,
    write_sidecar,
)

log = logging.getLogger("misokg")

OUTPUT_ENV = "MISOKG_OUTPUT_DIR"
ESTIMATE = "estimate"
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or path."""


# which RunConfig field each (section, key) feeds
_FIELDS = {
    ("problem", "name"): "problem",
    ("problem", "seed"): "problem_seed",
    ("kernel", "family"): "kernel_family",
    ("kernel", "use_prior"): "use_prior",
    ("kernel", "fit_restarts"): "fit_restarts",
    ("kernel", "refit_every"): "refit_every",
    ("acquisition", "strategy"): "strategy",
    ("acquisition", "n_discrete"): "n_discrete",
    ("acquisition", "resample"): "resample_discrete",
    ("acquisition", "restarts"): "restarts",
    ("acquisition", "max_iter"): "max_iter",
    ("acquisition", "workers"): "workers",
    ("acquisition", "h_workers"): "h_workers",
    ("budget", "mode"): "budget_mode",
    ("budget", "limit"): "budget",
    ("run", "init_per_dim"): "init_per_dim",
    ("run", "rec_grid_per_dim"): "rec_grid_per_dim",
}
_EXTRA = {
    ("problem", "file"),
    ("sources", "costs"),
    ("sources", "noises"),
    ("sources", "estimate_points"),
    ("sources", "estimate_repeats"),
    ("run", "replications"),
    ("run", "seed"),
    ("run", "output"),
    ("run", "jobs"),
}
_INT_FIELDS = {"problem_seed", "fit_restarts", "refit_every", "n_discrete", "restarts",
               "max_iter", "workers", "h_workers", "rec_grid_per_dim"}
_FLOAT_FIELDS = {"budget", "init_per_dim"}
_BOOL_FIELDS = {"use_prior", "resample_discrete"}


@dataclass
class Experiment:
    """A parsed configuration file plus command-line overrides."""

    run: RunConfig
    replications: int = 1
    base_seed: int = 0
    output: str = "results"
    jobs: int = 1
    costs: Optional[list] = None
    noises: Optional[list] = None
    estimate_points: int = 5
    estimate_repeats: int = 10
    source: str = ""
    raw: dict = field(default_factory=dict)

    def replication_config(self, r: int) -> RunConfig:
        return dataclasses.replace(self.run, seed=self.base_seed + r)

    def describe(self) -> dict:
        """Seed-independent description, used to detect mixed experiments."""
        cfg = self.run.to_dict()
        cfg.pop("seed")
        return {"run": cfg, "costs": self.costs, "noises": self.noises}


def _typed(name: str, key: str, value):
    if name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"field '{key}' must be true or false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"field '{key}' must be a number, got {value!r}")
    if name in _INT_FIELDS:
        if not isinstance(value, int) and not (isinstance(value, float) and value.is_integer()):
            raise ConfigError(f"field '{key}' must be an integer, got {value!r}")
        return int(value)
    if name in _FLOAT_FIELDS:
        if not isinstance(value, (int, float)):
            raise ConfigError(f"field '{key}' must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"field '{key}' must be a string, got {value!r}")
    return value


def resolve_config_path(path: str) -> Path:
    """A config path as given, or the name of a packaged config."""
    p = Path(path)
    if p.is_file():
        return p
    packaged = resources.files("misokg") / "configs" / p.name
    if p.parent == Path(".") and packaged.is_file():
        return Path(str(packaged))
    raise ConfigError(f"config file not found: {path}")


def _source_values(key: str, value, n: Optional[int]):
    if value == ESTIMATE:
        return ESTIMATE
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"field '{key}' must be a list of numbers or \"estimate\"")
    if n is not None and len(value) != n:
        raise ConfigError(f"field '{key}' lists {len(value)} values but the problem has {n} sources")
    return [float(v) for v in value]


def parse_config(raw: dict, base_dir: Path = Path(".")) -> Experiment:
    """Validate a configuration mapping and turn it into an :class:`Experiment`."""
    kwargs = {}
    extra = {}
    for section, table in raw.items():
        if not isinstance(table, dict):
            raise ConfigError(f"'{section}' must be a table")
        for key, value in table.items():
            dotted = f"{section}.{key}"
            if (section, key) in _FIELDS:
                name = _FIELDS[(section, key)]
                kwargs[name] = _typed(name, dotted, value)
            elif (section, key) in _EXTRA:
                extra[dotted] = value
            else:
                raise ConfigError(f"unknown field '{dotted}'")

    if "problem.file" in extra:
        if "problem" in kwargs:
            raise ConfigError("fields 'problem.name' and 'problem.file' are mutually exclusive")
        fpath = Path(str(extra["problem.file"]))
        if not fpath.is_absolute():
            fpath = base_dir / fpath
        if not fpath.is_file():
            raise ConfigError(f"field 'problem.file': file not found: {fpath}")
        try:
            with open(fpath, "rb") as fh:
                spec = tomllib.load(fh) if fpath.suffix == ".toml" else json.load(fh)
            problem_from_spec(spec)
        except (ValueError, KeyError, TypeError, SyntaxError) as exc:
            raise ConfigError(f"field 'problem.file' ({fpath}): {exc}") from None
        kwargs["problem_spec"] = spec
        kwargs["problem"] = str(spec.get("name", "custom"))
    elif "problem" not in kwargs:
        raise ConfigError("missing field 'problem.name' (or 'problem.file')")

    try:
        cfg = RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid run settings: {exc}") from None
    if cfg.budget <= 0:
        raise ConfigError("field 'budget.limit' must be positive")

    exp = Experiment(run=cfg, raw=raw)
    n_src = None
    try:
        n_src = build_problem(cfg).n_sources
    except ValueError as exc:
        raise ConfigError(f"field 'problem.name': {exc}") from None
    if "sources.costs" in extra:
        exp.costs = _source_values("sources.costs", extra["sources.costs"], n_src)
    if "sources.noises" in extra:
        exp.noises = _source_values("sources.noises", extra["sources.noises"], n_src)
    for key, attr in (("sources.estimate_points", "estimate_points"),
                      ("sources.estimate_repeats", "estimate_repeats"),
                      ("run.replications", "replications"), ("run.seed", "base_seed"),
                      ("run.jobs", "jobs")):
        if key in extra:
            v = extra[key]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"field '{key}' must be an integer, got {v!r}")
            setattr(exp, attr, v)
    if "run.output" in extra:
        exp.output = str(extra["run.output"])
    _check_experiment(exp)
    return exp


def _check_experiment(exp: Experiment) -> None:
    if exp.replications < 1:
        raise ConfigError("field 'run.replications' must be >= 1")
    if exp.jobs < 1:
        raise ConfigError("field 'run.jobs' must be >= 1")
    if exp.run.budget <= 0:
        raise ConfigError("field 'budget.limit' must be positive")
    if ESTIMATE in (exp.costs, exp.noises) and exp.estimate_repeats < 2:
        raise ConfigError("field 'sources.estimate_repeats' must be >= 2")
    if exp.costs not in (None, ESTIMATE) and min(exp.costs) <= 0:
        raise ConfigError("field 'sources.costs' must be strictly positive")
    if exp.noises not in (None, ESTIMATE) and min(exp.noises) < 0:
        raise ConfigError("field 'sources.noises' must be non-negative")


def load_config(path: str) -> Experiment:
    p = resolve_config_path(path)
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: malformed TOML: {exc}") from None
    exp = parse_config(raw, p.parent)
    exp.source = str(p)
    return exp


def build_problem(cfg: RunConfig) -> BenchmarkProblem:
    if cfg.problem_spec is not None:
        return problem_from_spec(cfg.problem_spec)
    return get_problem(cfg.problem, cfg.problem_seed)


def experiment_problem(exp: Experiment, seed: int) -> BenchmarkProblem:
    """The benchmark with the cost/noise model the configuration asks for."""
    problem = build_problem(exp.run)
    if exp.costs is None and exp.noises is None:
        return problem
    current = problem.cost_noise
    estimated = None
    if ESTIMATE in (exp.costs, exp.noises):
        estimated = estimate_cost_noise(problem, seed, exp.estimate_points, exp.estimate_repeats)

    def pick(given, est, now):
        if given is None:
            return list(now)
        if given == ESTIMATE:
            return list(est)
        return given

    costs = pick(exp.costs, estimated.costs if estimated else None, current.costs)
    noises = pick(exp.noises, estimated.noises if estimated else None, current.noises)
    return dataclasses.replace(problem, cost_noise=CostNoiseModel(costs, noises))


# --- run ----------------------------------------------------------------------

def _replication(exp: Experiment, r: int, out_dir: str) -> dict:
    cfg = exp.replication_config(r)
    problem = experiment_problem(exp, cfg.seed)
    result = run(problem, cfg)
    stem = os.path.join(out_dir, f"rep_{cfg.seed:05d}")
    with open(stem + ".csv", "w", newline="") as fh:
        fh.write(records_to_csv(result.records, problem.d))
    payload = result.sidecar(cfg, problem)
    payload["experiment"] = exp.describe()
    payload["cost_noise"] = problem.cost_noise.to_dict()
    write_sidecar(stem + ".json", payload)
    return {"seed": cfg.seed, "aborted": result.aborted, "failures": result.failures,
            "gain": result.rec_true_value - result.baseline,
            "cost": result.records[-1].cum_cost if result.records else result.initial_cost}


def output_dir(cli_value: Optional[str], exp: Experiment) -> str:
    if cli_value:
        return cli_value
    return os.environ.get(OUTPUT_ENV) or exp.output


def cmd_run(args) -> int:
    exp = load_config(args.config)
    if args.replications is not None:
        exp.replications = args.replications
    if args.seed is not None:
        exp.base_seed = args.seed
    if args.jobs is not None:
        exp.jobs = args.jobs
    if args.budget is not None:
        exp.run = dataclasses.replace(exp.run, budget=float(args.budget))
    if args.budget_mode is not None:
        try:
            exp.run = dataclasses.replace(exp.run, budget_mode=args.budget_mode)
        except ValueError as exc:
            raise ConfigError(f"option '--budget-mode': {exc}") from None
    if args.strategy is not None:
        try:
            exp.run = dataclasses.replace(exp.run, strategy=args.strategy)
        except ValueError as exc:
            raise ConfigError(f"option '--strategy': {exc}") from None
    _check_experiment(exp)
    out_dir = output_dir(args.output, exp)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir!r}: {exc}") from None

    reps = range(exp.replications)
    if exp.jobs == 1:
        summaries = [_replication(exp, r, out_dir) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            summaries = list(pool.map(_replication, [exp] * len(reps), reps, [out_dir] * len(reps)))
    failed = [s for s in summaries if s["aborted"]]
    for s in summaries:
        status = "ABORTED" if s["aborted"] else "ok"
        print(f"seed {s['seed']}: gain {s['gain']:.6g} at cost {s['cost']:.6g} [{status}]")
        for msg in s["failures"]:
            print(f"  {msg}", file=sys.stderr)
    print(f"wrote {len(summaries)} replication(s) to {out_dir}")
    return EXIT_PARTIAL if failed else EXIT_OK


# --- aggregate ----------------------------------------------------------------

def gain_curve(records, initial_cost: float, baseline: float, initial_true: float):
    """Step function of gain versus cumulative cost: ``(costs, gains)``."""
    costs = [initial_cost] + [r.cum_cost for r in records]
    gains = [initial_true - baseline] + [r.true_value - baseline for r in records]
    return np.asarray(costs), np.asarray(gains)


def locf(costs: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Last observation carried forward; NaN before the first observation."""
    idx = np.searchsorted(costs, grid, side="right") - 1
    out = np.where(idx >= 0, values[np.clip(idx, 0, None)], np.nan)
    return out.astype(float)


def summarize(curves: Sequence[tuple]) -> dict:
    """Mean gain and mean +- 2 standard errors on the union of all cost points."""
    grid = np.unique(np.concatenate([c for c, _ in curves]))
    G = np.vstack([locf(c, g, grid) for c, g in curves])
    n = np.sum(~np.isnan(G), axis=0)
    mean = np.nanmean(G, axis=0)
    se = np.zeros_like(mean)
    many = n > 1
    se[many] = np.nanstd(G[:, many], axis=0, ddof=1) / np.sqrt(n[many])
    return {"cum_cost_grid": grid, "n_reps": n, "mean_gain": mean,
            "lower_2se": mean - 2 * se, "upper_2se": mean + 2 * se}


def cmd_aggregate(args) -> int:
    d = Path(args.result_dir)
    if not d.is_dir():
        raise ConfigError(f"result directory not found: {d}")
    csvs = sorted(glob.glob(str(d / "rep_*.csv")))
    if not csvs:
        raise ConfigError(f"no replication CSV files (rep_*.csv) in {d}")
    curves, described, final_costs = [], None, []
    for path in csvs:
        side = Path(path).with_suffix(".json")
        if not side.is_file():
            raise ConfigError(f"missing JSON sidecar for {path}")
        meta = json.loads(side.read_text())
        desc = meta.get("experiment")
        if described is None:
            described = desc
        elif desc != described:
            print(f"error: {side} belongs to a different experiment than {csvs[0]}", file=sys.stderr)
            return EXIT_CONFIG
        records = read_records_csv(path)
        c, g = gain_curve(records, meta["initial_cost"], meta["baseline"],
                          meta["initial_rec_true_value"])
        curves.append((c, g))
        final_costs.append(c[-1])
    summary = summarize(curves)
    out = Path(args.output) if args.output else d / "summary.csv"
    cols = ["cum_cost_grid", "n_reps", "mean_gain", "lower_2se", "upper_2se"]
    with open(out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*(summary[k] for k in cols)):
            fh.write(",".join(repr(int(v)) if k == "n_reps" else repr(float(v))
                              for k, v in zip(cols, row)) + "\n")
    finals = [g[-1] for _, g in curves]
    print(f"replications: {len(curves)}")
    print(f"final mean gain: {np.mean(finals):.6g}")
    print(f"mean cumulative cost: {np.mean(final_costs):.6g}")
    print(f"wrote {out}")
    return EXIT_OK


# --- diagnostics --------------------------------------------------------------

def _override_seed(exp: Experiment, seed: Optional[int]) -> RunConfig:
    return exp.replication_config(0) if seed is None else dataclasses.replace(exp.run, seed=seed)


def cmd_hyperfit(args) -> int:
    exp = load_config(args.config)
    cfg = _override_seed(exp, args.seed)
    problem = experiment_problem(exp, cfg.seed)
    setup = initialize(problem, cfg)
    print(json.dumps({"problem": problem.name, "seed": cfg.seed,
                      "n_initial": int(setup.data.X.shape[0]),
                      "initial_cost": setup.initial_cost, **setup.fit}, indent=2))
    return EXIT_OK


def cmd_ckg_eval(args) -> int:
    exp = load_config(args.config)
    cfg = _override_seed(exp, args.seed)
    problem = experiment_problem(exp, cfg.seed)
    setup = initialize(problem, cfg)
    X = lhs_points(args.points, problem.box, np.random.default_rng([cfg.seed, 11]))
    ev = CkgEvaluator(setup.state, setup.A.points, problem.cost_noise)
    lines = ["source," + ",".join(f"x_{j}" for j in range(problem.d)) + ",h,cost,ckg"]
    for s in range(problem.n_sources):
        hv = ev.h_values(s, X)
        cost = problem.cost_noise.cost(s, X)
        for x, hh, c in zip(X, hv, cost):
            lines.append(",".join([str(s), *map(repr, map(float, x)), repr(float(hh)),
                                   repr(float(c)), repr(float(hh / c))]))
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="misokg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run replicated experiments")
    r.add_argument("--config", required=True, help="TOML file or name of a packaged config")
    r.add_argument("--replications", type=int)
    r.add_argument("--seed", type=int, help="base seed; replication r uses seed + r")
    r.add_argument("--budget", type=float, help="overrides budget.limit")
    r.add_argument("--budget-mode", help="iterations or total_cost")
    r.add_argument("--strategy", help="multistart or enumeration")
    r.add_argument("--jobs", type=int, help="replications run in parallel")
    r.add_argument("--output", help=f"output directory (else ${OUTPUT_ENV}, else run.output)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("aggregate", help="gain-vs-cost summary of a result directory")
    a.add_argument("result_dir")
    a.add_argument("--output", help="summary path (default: <result_dir>/summary.csv)")
    a.set_defaults(func=cmd_aggregate)

    h = sub.add_parser("hyperfit", help="fit hyperparameters on an initial design only")
    h.add_argument("--config", required=True)
    h.add_argument("--seed", type=int)
    h.set_defaults(func=cmd_hyperfit)

    c = sub.add_parser("ckg-eval", help="print the CKG landscape on a Latin hypercube grid")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--points", type=int, default=200)
    c.add_argument("--output")
    c.set_defaults(func=cmd_ckg_eval)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
