"""The optimization loop: initial design, fit, acquire, observe, recommend."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .acquisition import MULTISTART, canonical_strategy, latin_hypercube, lhs_points, next_sample
from .bench import BenchmarkProblem
from .gp import NumericalConditioningError, Observation, PosteriorState
from .costs import CostNoiseModel
from .hyper import DifferenceDataset, HyperPrior, build_priors, estimate_constant_cost_noise, fit_map
from .kernel import MeanFunction, MisoKernel, canonical_family

log = logging.getLogger(__name__)

_ESTIMATION_CALLS = 1 << 40

TOTAL_COST = "total_cost"
ITERATIONS = "iterations"


@dataclass(frozen=True)
class Budget:
    mode: str = ITERATIONS
    limit: float = 10

    def __post_init__(self):
        mode = self.mode.strip().lower().replace("-", "_")
        mode = {"totalcost": TOTAL_COST, "cost": TOTAL_COST, "iterations": ITERATIONS,
                "iteration": ITERATIONS}.get(mode.replace("_", ""), mode)
        if mode not in (TOTAL_COST, ITERATIONS):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if not self.limit >= 0:
            raise ValueError("budget limit must be non-negative")
        object.__setattr__(self, "mode", mode)


@dataclass
class RunConfig:
    """Knobs of a single optimization run (one replication)."""

    problem: str = "rosenbrock_lam"
    problem_spec: Optional[dict] = None
    problem_seed: int = 0
    kernel_family: str = "se"
    fixed_kernel: Optional[dict] = None
    n_discrete: Optional[int] = None
    resample_discrete: bool = False
    strategy: str = MULTISTART
    restarts: int = 10
    max_iter: int = 100
    budget_mode: str = ITERATIONS
    budget: float = 10
    init_per_dim: float = 2.5
    refit_every: int = 0
    use_prior: bool = True
    fit_restarts: int = 5
    rec_grid_per_dim: int = 1000
    seed: int = 0
    workers: int = 1
    h_workers: int = 1

    def __post_init__(self):
        self.kernel_family = canonical_family(self.kernel_family)
        self.strategy = canonical_strategy(self.strategy)
        Budget(self.budget_mode, self.budget)
        if self.init_per_dim <= 0:
            raise ValueError("init_per_dim must be positive")
        if self.refit_every < 0:
            raise ValueError("refit_every must be >= 0")
        if self.n_discrete is not None and self.n_discrete < 1:
            raise ValueError("n_discrete must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Record:
    iter: int
    source: int
    x: tuple
    y: float
    cost: float
    cum_cost: float
    rec_x: tuple
    rec_mu: float
    true_value: float


@dataclass
class RunResult:
    records: List[Record]
    recommendation: np.ndarray
    rec_mu: float
    rec_true_value: float
    initial_cost: float
    baseline: float
    initial_recommendation: np.ndarray
    initial_rec_true_value: float
    state: PosteriorState
    fit: Optional[dict] = None
    aborted: bool = False
    failures: List[str] = field(default_factory=list)

    def sidecar(self, config: RunConfig, problem: BenchmarkProblem) -> dict:
        return {
            "problem": problem.name,
            "d": problem.d,
            "n_sources": problem.n_sources,
            "seed": config.seed,
            "config": config.to_dict(),
            "initial_cost": self.initial_cost,
            "baseline": self.baseline,
            "initial_recommendation": np.asarray(self.initial_recommendation).tolist(),
            "initial_rec_true_value": self.initial_rec_true_value,
            "recommendation": np.asarray(self.recommendation).tolist(),
            "rec_mu": self.rec_mu,
            "rec_true_value": self.rec_true_value,
            "hyperparameters": self.fit,
            "aborted": self.aborted,
            "failures": self.failures,
            "state": self.state.to_dict(),
        }


def _mean_and_grad(state: PosteriorState, x: np.ndarray):
    """Posterior mean of the truth source and its gradient at one design."""
    mu = state.mean([0], x[None])[0]
    if state.n == 0:
        return mu, np.zeros_like(x)
    # f(0, x) couples to every training point only through the truth kernel
    G = state.kernel.sigma0.grad_x(x, state.X)
    return mu, G.T @ state.alpha


def recommend(state: PosteriorState, box, grid=None, n_grid: Optional[int] = None, seed=0):
    """Approximate argmax of the truth posterior mean over the box.

    The best point of a Latin hypercube grid (first one on ties) is refined
    by L-BFGS-B; the refinement is kept only if it strictly improves the mean.
    Returns ``(x, mu)``.
    """
    box = np.asarray(box, dtype=float)
    if grid is None:
        n_grid = n_grid or 1000 * box.shape[0]
        grid = lhs_points(n_grid, box, seed)
    grid = np.atleast_2d(grid)
    mu = state.mean(np.zeros(grid.shape[0], dtype=int), grid)
    k = int(np.argmax(mu))
    x0, best = grid[k].copy(), float(mu[k])
    if state.n == 0:
        return x0, best

    def neg(x):
        m, g = _mean_and_grad(state, x)
        return -m, -g

    res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=box)
    x1 = np.clip(res.x, box[:, 0], box[:, 1])
    m1 = float(state.mean([0], x1[None])[0])
    if m1 > best:
        return x1, m1
    return x0, best


def _initial_data(problem: BenchmarkProblem, X0: np.ndarray, seed: int, calls: list):
    values = np.empty((problem.n_sources, X0.shape[0]))
    noise = np.empty_like(values)
    cost = 0.0
    for s in range(problem.n_sources):
        noise[s] = problem.cost_noise.noise(s, X0)
        cost += float(problem.cost_noise.cost(s, X0).sum())
        for i, x in enumerate(X0):
            values[s, i] = problem.query(s, x, seed, calls[s])
            calls[s] += 1
    return values, noise, cost


def _fit(problem, config, data: DifferenceDataset, rng, state: Optional[PosteriorState] = None):
    """Fitted ``(kernel, mean, info)``.

    With ``state`` given (periodic refits), the discrepancy blocks are fitted
    on the shared initial design as before while the truth block uses every
    truth-source observation collected so far.
    """
    if config.fixed_kernel is not None:
        kern = MisoKernel.from_dict(config.fixed_kernel, config.kernel_family)
        mean = MeanFunction(config.fixed_kernel.get("mean", float(np.mean(data.truth))))
        return kern, mean, {"kernel": kern.to_dict(), "mean": mean.constant, "fixed": True}
    priors = build_priors(data, problem.box, problem.cost_noise)
    fit = fit_map(data, priors, family=config.kernel_family, box=problem.box,
                  use_prior=config.use_prior, restarts=config.fit_restarts,
                  seed=int(rng.integers(2**63)))
    if state is None:
        return fit.kernel, fit.mean, fit.to_dict()
    on_truth = state.sources == 0
    truth = DifferenceDataset(state.X[on_truth], state.y[on_truth][None], state.noise[on_truth][None])
    truth_fit = fit_map(truth, HyperPrior(priors.blocks[:1]), family=config.kernel_family,
                        box=problem.box, use_prior=config.use_prior,
                        restarts=config.fit_restarts, seed=int(rng.integers(2**63)))
    kern = MisoKernel(truth_fit.kernel.sigma0, fit.kernel.discrepancy)
    info = {**fit.to_dict(), "kernel": kern.to_dict(), "mean": truth_fit.mean.constant}
    return kern, truth_fit.mean, info


@dataclass
class Setup:
    """Everything a run has before its first acquisition step."""

    state: PosteriorState
    data: DifferenceDataset
    fit: dict
    initial_cost: float
    A: object
    grid: np.ndarray
    calls: list
    a_rng: np.random.Generator
    acq_rng: np.random.Generator
    fit_rng: np.random.Generator


def initialize(problem: BenchmarkProblem, config: RunConfig) -> Setup:
    """Evaluate the initial design at every source and fit the hyperparameters.

    Seeding is split into independent streams (design, discretization,
    acquisition, fitting, recommendation grid) derived from ``config.seed``.
    """
    d, box = problem.d, problem.box
    seed = int(config.seed)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    design_rng, a_rng, acq_rng, fit_rng, rec_rng = streams
    calls = [0] * problem.n_sources

    n_init = max(2, math.ceil(config.init_per_dim * d))
    X0 = lhs_points(n_init, box, design_rng)
    values, noise, initial_cost = _initial_data(problem, X0, seed, calls)
    data = DifferenceDataset(X0, values, noise)
    kernel, mean, fit_info = _fit(problem, config, data, fit_rng)
    state = PosteriorState(kernel, mean,
                           np.repeat(np.arange(problem.n_sources), n_init),
                           np.tile(X0, (problem.n_sources, 1)),
                           values.ravel(), noise.ravel())
    A = latin_hypercube(config.n_discrete or 50 * d, box, a_rng)
    grid = lhs_points(config.rec_grid_per_dim * d, box, rec_rng)
    return Setup(state, data, fit_info, initial_cost, A, grid, calls, a_rng, acq_rng, fit_rng)


def estimate_cost_noise(problem: BenchmarkProblem, seed: int = 0, n_points: int = 5,
                        n_repeats: int = 10) -> CostNoiseModel:
    """Constant cost and noise per source estimated from repeated queries.

    Every source is queried ``n_repeats`` times at ``n_points`` Latin
    hypercube designs. The query streams use call indices far above those of
    a run so the estimate never reuses a run's noise draws.
    """
    X = lhs_points(n_points, problem.box, np.random.default_rng([int(seed), 7]))
    repeats, costs = [], []
    for s in range(problem.n_sources):
        r = np.array([[problem.query(s, x, seed, _ESTIMATION_CALLS + i * n_repeats + j)
                       for j in range(n_repeats)] for i, x in enumerate(X)])
        repeats.append(r)
        costs.append(problem.cost_noise.cost(s, X))
    return estimate_constant_cost_noise(repeats, costs)


def run(problem: BenchmarkProblem, config: RunConfig) -> RunResult:
    """Run one replication of the cost-sensitive KG loop on ``problem``.

    The initial Latin hypercube design (``ceil(init_per_dim * d)`` points) is
    evaluated at every source; its cost is reported separately from the
    budget, which only limits acquisition queries.
    """
    budget = Budget(config.budget_mode, config.budget)
    setup = initialize(problem, config)
    box, cost_model, seed = problem.box, problem.cost_noise, int(config.seed)
    state, data, fit_info, calls = setup.state, setup.data, setup.fit, setup.calls
    a_rng, acq_rng, fit_rng = setup.a_rng, setup.acq_rng, setup.fit_rng
    A, grid, n_discrete = setup.A, setup.grid, len(setup.A)
    initial_cost = setup.initial_cost
    has_truth = problem.true_objective is not None
    if has_truth:
        baseline = max(problem.truth(x) for x in data.X)
    else:
        baseline = float(data.truth.max())

    rec_x, rec_mu = recommend(state, box, grid)
    init_rec = rec_x.copy()
    init_rec_true = problem.truth(rec_x) if has_truth else float("nan")

    records: List[Record] = []
    failures: List[str] = []
    aborted = False
    spent = 0.0
    cum = initial_cost
    it = 0
    while True:
        if budget.mode == ITERATIONS and it >= budget.limit:
            break
        if config.resample_discrete and it > 0:
            A = latin_hypercube(n_discrete, box, a_rng)
        remaining = budget.limit - spent
        allowed = list(range(problem.n_sources))
        if budget.mode == TOTAL_COST:
            allowed = [s for s in allowed if cost_model.cost(s, A.points).min() <= remaining]
        if config.refit_every and it > 0 and it % config.refit_every == 0:
            kernel, mean, fit_info = _fit(problem, config, data, fit_rng, state)
            state = PosteriorState(kernel, mean, state.sources, state.X, state.y, state.noise)
        choice = None
        acq_seed = int(acq_rng.integers(2**63))
        while allowed:
            choice = next_sample(state, A, cost_model, config.strategy, box=box, sources=allowed,
                                 restarts=config.restarts, max_iter=config.max_iter, seed=acq_seed,
                                 workers=config.workers, h_workers=config.h_workers)
            if budget.mode == TOTAL_COST and choice.cost > remaining:
                allowed.remove(choice.source)
                choice = None
                continue
            break
        if choice is None:
            break

        y = None
        for attempt in range(2):
            try:
                y = problem.query(choice.source, choice.x, seed, calls[choice.source])
                calls[choice.source] += 1
                if not np.isfinite(y):
                    raise ValueError(f"non-finite observation {y}")
                break
            except Exception as exc:  # noqa: BLE001 - any source failure is recorded
                calls[choice.source] += 1
                failures.append(f"iteration {it + 1} attempt {attempt + 1}: {exc!r}")
                log.warning("query of source %d failed: %r", choice.source, exc)
                y = None
        if y is None:
            aborted = True
            break

        noise_var = float(cost_model.noise(choice.source, choice.x[None])[0])
        try:
            state = state.update(Observation(choice.source, choice.x, y, noise_var))
        except NumericalConditioningError as exc:
            failures.append(f"iteration {it + 1}: {exc}")
            aborted = True
            break
        it += 1
        spent += choice.cost
        cum += choice.cost
        rec_x, rec_mu = recommend(state, box, grid)
        true_value = problem.truth(rec_x) if has_truth else float("nan")
        records.append(Record(it, choice.source, tuple(float(v) for v in choice.x), float(y),
                              float(choice.cost), float(cum), tuple(float(v) for v in rec_x),
                              float(rec_mu), float(true_value)))

    return RunResult(
        records=records,
        recommendation=rec_x,
        rec_mu=float(rec_mu),
        rec_true_value=problem.truth(rec_x) if has_truth else float("nan"),
        initial_cost=initial_cost,
        baseline=baseline,
        initial_recommendation=init_rec,
        initial_rec_true_value=init_rec_true,
        state=state,
        fit=fit_info,
        aborted=aborted,
        failures=failures,
    )


# --- run-log files -----------------------------------------------------------

def csv_header(d: int) -> List[str]:
    return (["iter", "source"] + [f"x_{j}" for j in range(d)] + ["y", "cost", "cum_cost"]
            + [f"rec_x_{j}" for j in range(d)] + ["rec_mu", "true_value"])


def records_to_csv(records: List[Record], d: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(d))
    for r in records:
        w.writerow([r.iter, r.source, *map(repr, r.x), repr(r.y), repr(r.cost), repr(r.cum_cost),
                    *map(repr, r.rec_x), repr(r.rec_mu), repr(r.true_value)])
    return buf.getvalue()


def write_records_csv(path, records: List[Record], d: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records, d))


def read_records_csv(path) -> List[Record]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x_"))
    if header != csv_header(d):
        raise ValueError(f"{path}: unexpected CSV header {header}")
    out = []
    for row in body:
        vals = [float(v) for v in row]
        out.append(Record(int(row[0]), int(row[1]), tuple(vals[2:2 + d]), vals[2 + d], vals[3 + d],
                          vals[4 + d], tuple(vals[5 + d:5 + 2 * d]), vals[5 + 2 * d], vals[6 + 2 * d]))
    return out


def write_sidecar(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
