"""Benchmark problems with several information sources.

Every problem is posed as maximization. Rosenbrock is a minimization surface,
so its sources return the negated values ``-(f(x) + ...)``; the raw
(minimization) forms are available as module functions.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .acquisition import lhs_points
from .costs import CostNoiseModel

# evaluator(x, rng) -> y for a single design
Evaluator = Callable[[np.ndarray, np.random.Generator], float]


@dataclass
class BenchmarkProblem:
    name: str
    d: int
    box: np.ndarray
    sources: List[Evaluator]
    cost_noise: CostNoiseModel
    true_objective: Optional[Callable[[np.ndarray], float]] = None
    known_optimum: Optional[Tuple[np.ndarray, float]] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float)
        if self.box.shape != (self.d, 2):
            raise ValueError(f"box must have shape ({self.d}, 2)")
        if len(self.sources) != self.cost_noise.n_sources:
            raise ValueError("one cost/noise entry per source is required")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def rng(self, seed: int, source: int, call_index: int) -> np.random.Generator:
        """Counter-based stream: the same (seed, source, call) always gives the same draw."""
        return np.random.default_rng([int(seed), int(source), int(call_index)])

    def query(self, source: int, x, seed: int = 0, call_index: int = 0) -> float:
        x = np.asarray(x, dtype=float).reshape(self.d)
        return float(self.sources[source](x, self.rng(seed, source, call_index)))

    def truth(self, x) -> float:
        if self.true_objective is None:
            raise ValueError(f"problem {self.name!r} has no exact objective")
        return float(self.true_objective(np.asarray(x, dtype=float).reshape(self.d)))


# --- Rosenbrock ------------------------------------------------------------

ROSENBROCK_CONFIGS = {
    # u: truth noise scale, v: oscillation amplitude, noise variances, costs
    "lam": dict(u=0.0, v=0.1, noise=(1e-3, 1e-6), cost=(1000.0, 1.0)),
    "alternative": dict(u=1.0, v=2.0, noise=(1.0, 1e-6), cost=(50.0, 1.0)),
}


def rosenbrock(x) -> float:
    x = np.asarray(x, dtype=float)
    return float((1.0 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2)


def rosenbrock_biased(x, v: float) -> float:
    """Cheap source in minimization form: ``f(x) + v sin(10 x1 + 5 x2)``."""
    x = np.asarray(x, dtype=float)
    return rosenbrock(x) + v * math.sin(10.0 * x[0] + 5.0 * x[1])


def rosenbrock_miso(config: str = "lam") -> BenchmarkProblem:
    """Two-source Rosenbrock on ``[-2, 2]^2``.

    ``config="lam"``: noise-free truth (``u=0``), ``v=0.1``, noise variances
    1e-3 / 1e-6, costs 1000 / 1. ``config="alternative"``: ``u=1``, ``v=2``,
    truth noise variance 1 and cost 50.
    """
    key = config.strip().lower()
    if key not in ROSENBROCK_CONFIGS:
        raise ValueError(f"unknown Rosenbrock config {config!r}")
    c = ROSENBROCK_CONFIGS[key]
    u, v = c["u"], c["v"]

    def is0(x, rng):
        return -(rosenbrock(x) + u * rng.standard_normal())

    def is1(x, rng):
        return -rosenbrock_biased(x, v)

    return BenchmarkProblem(
        name=f"rosenbrock_{key}",
        d=2,
        box=[[-2.0, 2.0], [-2.0, 2.0]],
        sources=[is0, is1],
        cost_noise=CostNoiseModel.constant(c["cost"], c["noise"]),
        true_objective=lambda x: -rosenbrock(x),
        known_optimum=(np.array([1.0, 1.0]), 0.0),
        info={"u": u, "v": v},
    )


# --- assemble-to-order stand-in --------------------------------------------

ATO_NOISE = (0.056, 2.944, 0.332)
ATO_COST = (17.1, 0.5, 3.9)
ATO_OPTIMUM = 120.0
ATO_BIAS_MEAN = 6.0
ATO_BIAS_VARIANCE = 200.0


class _Bumps:
    def __init__(self, centers, widths, heights):
        self.centers = np.asarray(centers, dtype=float)
        self.widths = np.asarray(widths, dtype=float)
        self.heights = np.asarray(heights, dtype=float)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        sq = ((X[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return (self.heights * np.exp(-0.5 * sq / self.widths ** 2)).sum(-1)


class _FourierField:
    def __init__(self, freqs, phases, weights, scale, offset):
        self.freqs = freqs
        self.phases = phases
        self.weights = weights
        self.scale = scale
        self.offset = offset

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.offset + self.scale * (np.cos(X @ self.freqs.T + self.phases) @ self.weights)


def _ato_surfaces(seed: int):
    rng = np.random.default_rng([int(seed), 0xA70])
    d = 8
    centers = np.vstack([rng.uniform(7.0, 13.0, d), rng.uniform(3.0, 17.0, (2, d))])
    heights = np.array([1.0, 0.5, 0.4])
    widths = np.array([14.0, 5.0, 5.0])
    bumps = _Bumps(centers, widths, heights)
    # scale so that the global maximum is exactly 120
    res = minimize(lambda x: -bumps(x)[0], centers[0], method="L-BFGS-B", bounds=[(0.0, 20.0)] * d)
    peak = -float(res.fun)
    g = _Bumps(centers, widths, heights * ATO_OPTIMUM / peak)
    x_star = res.x

    # correlation length of the bias comparable to the broad bump of the truth
    n_feat = 24
    freqs = rng.normal(0.0, 1.0 / 15.0, (n_feat, d))
    phases = rng.uniform(0.0, 2 * np.pi, n_feat)
    weights = rng.normal(size=n_feat)
    raw = _FourierField(freqs, phases, weights, 1.0, 0.0)
    # calibrate mean and variance of the bias on a fixed reference design
    ref = raw(lhs_points(20000, [[0.0, 20.0]] * d, np.random.default_rng([int(seed), 0xB1A5])))
    scale = math.sqrt(ATO_BIAS_VARIANCE) / ref.std()
    offset = ATO_BIAS_MEAN - scale * ref.mean()
    bias = _FourierField(freqs, phases, weights, scale, offset)
    return g, bias, x_star


def ato_synthetic(seed: int = 0) -> BenchmarkProblem:
    """Synthetic 8-d stand-in for the assemble-to-order benchmark on ``[0, 20]^8``.

    The truth is a sum of three Gaussian bumps scaled to a maximum of 120.
    ``IS_0`` and ``IS_2`` observe it with noise variances 0.056 and 0.332;
    ``IS_1`` adds a smooth bias field with mean 6 and variance 200 and has
    noise variance 2.944. Costs are 17.1, 0.5 and 3.9. This does not simulate
    an inventory system; it only reproduces the cost, noise and bias scales.
    """
    g, bias, x_star = _ato_surfaces(seed)
    sd = [math.sqrt(v) for v in ATO_NOISE]

    def is0(x, rng):
        return float(g(x)[0]) + sd[0] * rng.standard_normal()

    def is1(x, rng):
        return float(g(x)[0] + bias(x)[0]) + sd[1] * rng.standard_normal()

    def is2(x, rng):
        return float(g(x)[0]) + sd[2] * rng.standard_normal()

    return BenchmarkProblem(
        name="ato_synthetic",
        d=8,
        box=[[0.0, 20.0]] * 8,
        sources=[is0, is1, is2],
        cost_noise=CostNoiseModel.constant(ATO_COST, ATO_NOISE),
        true_objective=lambda x: float(g(x)[0]),
        known_optimum=(x_star, ATO_OPTIMUM),
        info={"seed": seed, "truth": g, "bias": bias},
    )


# --- analytic two-source problem ----------------------------------------------

def two_source_analytic(d: int = 2) -> BenchmarkProblem:
    """Negative sphere on ``[-1, 1]^d`` plus a cheap source biased by ``0.05 cos(sum x)``."""
    if d < 1:
        raise ValueError("d must be >= 1")

    def g(x):
        return -float(np.sum(np.asarray(x) ** 2))

    def is1(x, rng):
        return g(x) + 0.05 * math.cos(float(np.sum(x)))

    return BenchmarkProblem(
        name=f"two_source_analytic_{d}d",
        d=d,
        box=[[-1.0, 1.0]] * d,
        sources=[lambda x, rng: g(x), is1],
        cost_noise=CostNoiseModel.constant([1.0, 1.0], [1e-6, 1e-6]),
        true_objective=g,
        known_optimum=(np.zeros(d), 0.0),
    )


# --- declarative problems ----------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}


class Expression:
    """Closed-form expression in ``x_0 .. x_{d-1}``.

    Grammar: numbers, ``+ - * / ^`` (``**`` also accepted), ``sin``, ``cos``,
    ``exp`` and parentheses. Anything else is rejected at parse time.
    """

    def __init__(self, text: str, d: int):
        self.text = text
        self.d = d
        try:
            # ``^`` means power; Python would parse it as xor with lower precedence than ``+``
            source = text.replace("·", "*").replace("−", "-").replace("^", "**")
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {text!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS) \
                    or len(node.args) != 1 or node.keywords:
                raise ValueError(f"unsupported function call in {self.text!r}")
            self._check(node.args[0])
        elif isinstance(node, ast.Name):
            name = node.id
            if not (name.startswith("x_") and name[2:].isdigit() and int(name[2:]) < self.d):
                raise ValueError(f"unknown variable {name!r} in {self.text!r} (d={self.d})")
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            pass
        else:
            raise ValueError(f"unsupported syntax in {self.text!r}")

    def _eval(self, node, x):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, x), self._eval(node.right, x))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, x))
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](self._eval(node.args[0], x))
        if isinstance(node, ast.Name):
            return float(x[int(node.id[2:])])
        return float(node.value)

    def __call__(self, x) -> float:
        return float(self._eval(self._tree, np.asarray(x, dtype=float)))


def problem_from_spec(spec: dict) -> BenchmarkProblem:
    """Build a problem from a declarative mapping.

    Keys: ``box`` (list of ``[lo, hi]``), ``sources`` (list of tables with
    ``expr``, ``cost`` and ``noise``; source 0 is the truth), optional
    ``objective`` (exact expression of the truth, default: the first source
    expression), optional ``name`` and ``minimize`` (negate everything).
    Gaussian noise with the given variance is added to each source.
    """
    try:
        box = np.asarray(spec["box"], dtype=float)
        entries = spec["sources"]
    except KeyError as exc:
        raise ValueError(f"custom problem is missing field {exc.args[0]!r}") from None
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("field 'box' must be a list of [lower, upper] pairs")
    d = box.shape[0]
    if len(entries) < 1:
        raise ValueError("field 'sources' must list at least the truth source")
    sign = -1.0 if spec.get("minimize", False) else 1.0
    sources, costs, noises = [], [], []
    for k, entry in enumerate(entries):
        for key in ("expr", "cost", "noise"):
            if key not in entry:
                raise ValueError(f"sources[{k}] is missing field {key!r}")
        expr = Expression(str(entry["expr"]), d)
        sd = math.sqrt(float(entry["noise"]))

        def evaluate(x, rng, expr=expr, sd=sd):
            return sign * expr(x) + sd * rng.standard_normal()

        sources.append(evaluate)
        costs.append(float(entry["cost"]))
        noises.append(float(entry["noise"]))
    objective = Expression(str(spec.get("objective", entries[0]["expr"])), d)
    return BenchmarkProblem(
        name=str(spec.get("name", "custom")),
        d=d,
        box=box,
        sources=sources,
        cost_noise=CostNoiseModel.constant(costs, noises),
        true_objective=lambda x: sign * objective(x),
        info={"spec": spec},
    )


BENCHMARKS = {
    "rosenbrock_lam": lambda seed: rosenbrock_miso("lam"),
    "rosenbrock_alternative": lambda seed: rosenbrock_miso("alternative"),
    "ato_synthetic": lambda seed: ato_synthetic(seed),
    "two_source_analytic_1d": lambda seed: two_source_analytic(1),
    "two_source_analytic_2d": lambda seed: two_source_analytic(2),
}


def get_problem(name: str, seed: int = 0) -> BenchmarkProblem:
    key = name.strip().lower()
    if key not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; available: {sorted(BENCHMARKS)}")
    return BENCHMARKS[key](seed)
