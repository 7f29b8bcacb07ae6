"""Cost-sensitive Knowledge Gradient.

The core quantity is ``h(a, b) = E[max_i a_i + b_i Z] - max_i a_i`` for a
standard normal ``Z``. It is computed exactly from the upper envelope of the
lines ``z -> a_i + b_i z``: after sorting by slope and discarding lines that
never attain the maximum, ``h`` is a sum over the envelope breakpoints.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import erfc, erfcx
from scipy.stats import qmc

from .costs import CostNoiseModel
from .gp import PosteriorState
from .kernel import noise_with_jitter

MULTISTART = "multistart"
ENUMERATION = "enumeration"
_STRATEGY_ALIASES = {
    "multistart": MULTISTART,
    "multistartgradient": MULTISTART,
    "multistart_gradient": MULTISTART,
    "gradient": MULTISTART,
    "enumeration": ENUMERATION,
    "discreteenumeration": ENUMERATION,
    "discrete_enumeration": ENUMERATION,
    "discrete": ENUMERATION,
}

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_ASYMPTOTIC_TERMS = 16


def canonical_strategy(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in _STRATEGY_ALIASES:
        raise ValueError(f"unknown acquisition strategy {name!r}")
    return _STRATEGY_ALIASES[key]


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT2PI * np.exp(-0.5 * z * z)


def norm_cdf(z):
    z = np.asarray(z, dtype=float)
    return 0.5 * erfc(-z / math.sqrt(2.0))


def expected_positive_part(z):
    """``f(z) = phi(z) + z Phi(z) = E[max(z + Z, 0)]``.

    Below ``z = -6`` the direct form cancels badly. The scaled complementary
    error function covers ``-10 <= z < -6``; further out the asymptotic series
    ``phi(z) / z^2 * sum_k (-1)^k (2k+1)!! / z^(2k)`` is used.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    direct = z >= -6.0
    mid = (z < -6.0) & (z >= -10.0)
    tail = z < -10.0
    zz = z[direct]
    out[direct] = norm_pdf(zz) + zz * norm_cdf(zz)
    if np.any(mid):
        t = -z[mid]
        out[mid] = np.exp(-0.5 * t * t) * (_INV_SQRT2PI - 0.5 * t * erfcx(t / math.sqrt(2.0)))
    if np.any(tail):
        t2 = z[tail] ** 2
        total = np.zeros_like(t2)
        term = np.ones_like(t2)
        for k in range(_ASYMPTOTIC_TERMS):
            total += term
            term = -term * (2 * k + 3) / t2
        out[tail] = norm_pdf(z[tail]) / t2 * total
    return out


def _prepare(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Sort by ascending slope; among equal slopes keep only the largest intercept."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"a and b must have equal length, got {a.size} and {b.size}")
    if a.size == 0:
        raise ValueError("h needs at least one alternative")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("a and b must be finite")
    order = np.lexsort((a, b))
    a, b = a[order], b[order]
    keep = np.append(b[1:] != b[:-1], True)
    return a[keep], b[keep]


def _scan(a: list, b: list, indices) -> List[int]:
    """Linear scan keeping the lines that attain the max for some ``z``."""
    keep: List[int] = []
    cuts: List[float] = []
    for i in indices:
        while keep:
            j = keep[-1]
            c = (a[j] - a[i]) / (b[i] - b[j])
            if len(keep) > 1 and c <= cuts[-1]:
                keep.pop()
                cuts.pop()
                continue
            break
        else:
            c = -math.inf
        keep.append(i)
        cuts.append(c)
    return keep


def _terms(a: np.ndarray, b: np.ndarray, env: Sequence[int]) -> np.ndarray:
    idx = np.asarray(env, dtype=int)
    if idx.size < 2:
        return np.zeros(0)
    left, right = idx[:-1], idx[1:]
    c = (a[left] - a[right]) / (b[right] - b[left])
    return (b[right] - b[left]) * expected_positive_part(-np.abs(c))


def envelope(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Lines of the upper envelope, sorted by slope, as ``(a, b)`` arrays."""
    a, b = _prepare(a, b)
    env = _scan(a.tolist(), b.tolist(), range(a.size))
    return a[env], b[env]


def h(a, b) -> float:
    """Exact ``E[max_i a_i + b_i Z] - max_i a_i`` for standard normal ``Z``."""
    a, b = _prepare(a, b)
    env = _scan(a.tolist(), b.tolist(), range(a.size))
    return max(math.fsum(_terms(a, b, env)), 0.0)


def h_unpruned(a, b) -> float:
    """Reference value of ``h`` by integrating the max over every pairwise breakpoint.

    Quadratic in the number of alternatives and independent of the
    domination scan; used to cross-check :func:`h`.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValueError("a and b must be non-empty and of equal length")
    i, j = np.triu_indices(a.size, k=1)
    distinct = b[i] != b[j]
    cuts = (a[i] - a[j])[distinct] / (b[j] - b[i])[distinct]
    cuts = np.unique(cuts)
    edges = np.concatenate([[-np.inf], cuts, [np.inf]])
    lo, hi = edges[:-1], edges[1:]
    if cuts.size:
        mid = np.where(np.isinf(lo), hi - 1.0, np.where(np.isinf(hi), lo + 1.0, 0.5 * (lo + hi)))
    else:
        mid = np.zeros(1)
    winner = np.argmax(a[None, :] + b[None, :] * mid[:, None], axis=1)
    aw, bw = a[winner], b[winner]
    pdf_lo = np.where(np.isinf(lo), 0.0, norm_pdf(np.where(np.isinf(lo), 0.0, lo)))
    pdf_hi = np.where(np.isinf(hi), 0.0, norm_pdf(np.where(np.isinf(hi), 0.0, hi)))
    # integral of (a + b z) phi(z) over [lo, hi]; tails use the upper cdf for accuracy
    mass = np.where(lo >= 0, norm_cdf(-lo) - norm_cdf(-hi), norm_cdf(hi) - norm_cdf(lo))
    top = a.max()
    pieces = (aw - top) * mass + bw * (pdf_lo - pdf_hi)
    return max(math.fsum(pieces), 0.0)


def _merge(a: list, b: list, L: List[int], R: List[int]) -> List[int]:
    """Join two adjacent envelopes; ``L`` holds the smaller slopes.

    Only a suffix of ``L`` and a prefix of ``R`` can drop out, so it suffices to
    walk inwards until the last kept element of ``L`` and the first kept element
    of ``R`` both survive against each other's neighbours.
    """
    i, j = len(L) - 1, 0

    def dominated(lo, mid, hi):
        return (a[mid] - a[hi]) / (b[hi] - b[mid]) <= (a[lo] - a[mid]) / (b[mid] - b[lo])

    while True:
        moved = False
        while i > 0 and dominated(L[i - 1], L[i], R[j]):
            i -= 1
            moved = True
        while j < len(R) - 1 and dominated(L[i], R[j], R[j + 1]):
            j += 1
            moved = True
        if not moved:
            return L[: i + 1] + R[j:]


def h_parallel(a, b, workers: int = 1) -> float:
    """:func:`h` with the domination scan split over ``workers`` threads.

    The sorted alternatives are cut into contiguous blocks, each block is
    scanned independently, and adjacent envelopes are merged pairwise in
    ``ceil(log2(workers))`` rounds. The breakpoint terms are also computed
    per block; the final sum is exactly rounded so the result does not depend
    on the partition.
    """
    workers = int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return h(a, b)
    a, b = _prepare(a, b)
    al, bl = a.tolist(), b.tolist()
    blocks = [blk for blk in np.array_split(np.arange(a.size), workers) if blk.size]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        envs = list(pool.map(lambda blk: _scan(al, bl, blk.tolist()), blocks))
        while len(envs) > 1:
            pairs = [(envs[k], envs[k + 1]) for k in range(0, len(envs) - 1, 2)]
            merged = list(pool.map(lambda p: _merge(al, bl, p[0], p[1]), pairs))
            if len(envs) % 2:
                merged.append(envs[-1])
            envs = merged
        env = envs[0]
        # consecutive pieces overlap by one index so every breakpoint is counted once
        cut = [blk.tolist() for blk in np.array_split(np.arange(len(env)), workers) if blk.size]
        spans = [env[c[0]: c[-1] + 2] for c in cut]
        parts = list(pool.map(lambda s: _terms(a, b, s), spans))
    return max(math.fsum(np.concatenate(parts)), 0.0)


@dataclass(frozen=True)
class DiscreteCandidateSet:
    """Finite set of designs used for the inner maximization."""

    points: np.ndarray
    origin: str = "LatinHypercube"

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("candidate set is empty")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("candidate points must be pairwise distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.origin not in ("LatinHypercube", "UserSupplied"):
            raise ValueError(f"unknown origin {self.origin!r}")

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_inside(self, box) -> None:
        box = np.asarray(box, dtype=float)
        if np.any(self.points < box[:, 0]) or np.any(self.points > box[:, 1]):
            raise ValueError("candidate points must lie inside the domain box")


def lhs_points(n: int, box, seed=None) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise ValueError(f"box must be (d, 2) with lower < upper, got {box.tolist()}")
    unit = qmc.LatinHypercube(d=box.shape[0], rng=seed).random(n)
    return qmc.scale(unit, box[:, 0], box[:, 1])


def latin_hypercube(n: int, box, seed=None) -> DiscreteCandidateSet:
    """Latin hypercube design: one point per stratum along every axis."""
    return DiscreteCandidateSet(lhs_points(n, box, seed), "LatinHypercube")


@dataclass(frozen=True)
class AcquisitionResult:
    source: int
    x: np.ndarray
    ckg: float
    h_value: float
    cost: float
    no_improvement: bool = False
    details: dict = field(default_factory=dict, compare=False)


def _targets(A) -> np.ndarray:
    if isinstance(A, DiscreteCandidateSet):
        return A.points
    return np.atleast_2d(np.asarray(A, dtype=float))


class CkgEvaluator:
    """Cost-sensitive KG for a fixed posterior and discretization.

    Quantities that depend only on the posterior and the targets are computed
    once, so each candidate costs one triangular solve plus one ``h``.
    """

    def __init__(self, state: PosteriorState, A, cost_model: CostNoiseModel, h_workers: int = 1):
        if cost_model.n_sources != state.kernel.n_sources:
            raise ValueError("cost model and kernel disagree on the number of sources")
        self.state = state
        self.targets = _targets(A)
        self.cost_model = cost_model
        self.h_workers = int(h_workers)
        zeros = np.zeros(self.targets.shape[0], dtype=int)
        self._zeros = zeros
        self.a = state.mean(zeros, self.targets)
        self._VA = state.whitened_cross(zeros, self.targets)

    def sigma_tilde(self, source: int, X) -> np.ndarray:
        """Rows are the one-step sensitivity vectors of each candidate in ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        src = np.full(X.shape[0], int(source))
        state = self.state
        cov = state.kernel.matrix(self._zeros, self.targets, src, X)
        var = state.kernel.diag(src, X)
        if state.n:
            Vc = state.whitened_cross(src, X)
            cov -= self._VA.T @ Vc
            var = var - np.einsum("ij,ij->j", Vc, Vc)
        noise = noise_with_jitter(self.cost_model.noise(source, X), state.jitter)
        denom = noise + np.maximum(var, 0.0)
        if np.any(denom <= 0):
            raise np.linalg.LinAlgError("non-positive predictive variance at a candidate")
        return (cov / np.sqrt(denom)).T

    def h_values(self, source: int, X) -> np.ndarray:
        S = self.sigma_tilde(source, X)
        if self.h_workers > 1:
            return np.array([h_parallel(self.a, s, self.h_workers) for s in S])
        return np.array([h(self.a, s) for s in S])

    def values(self, source: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.h_values(source, X) / self.cost_model.cost(source, X)

    def evaluate(self, source: int, x) -> AcquisitionResult:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cost = float(self.cost_model.cost(source, x[None])[0])
        hv = float(self.h_values(source, x[None])[0])
        return AcquisitionResult(int(source), x, hv / cost, hv, cost)

    def value_and_gradient(self, source: int, x, step) -> Tuple[float, np.ndarray]:
        """CKG and its central finite-difference gradient at ``x``."""
        x = np.asarray(x, dtype=float)
        d = x.size
        step = np.broadcast_to(np.asarray(step, dtype=float), (d,))
        E = np.diag(step)
        pts = np.vstack([x[None], x + E, x - E])
        v = self.values(source, pts)
        return float(v[0]), (v[1: d + 1] - v[d + 1:]) / (2.0 * step)


def ckg(state: PosteriorState, A, cand, cost_model: CostNoiseModel) -> AcquisitionResult:
    """Cost-sensitive KG of observing ``cand = (source, x)``."""
    source, x = cand
    return CkgEvaluator(state, A, cost_model).evaluate(source, x)


def fd_step(box) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    return 1e-5 * (box[:, 1] - box[:, 0])


def ckg_gradient(evaluator: CkgEvaluator, source: int, x, box) -> np.ndarray:
    """Central-difference gradient used by the multistart ascent."""
    return evaluator.value_and_gradient(source, x, fd_step(box))[1]


def _enumerate(evaluator: CkgEvaluator, points: np.ndarray, sources: Sequence[int], workers: int):
    def one(src):
        hv = evaluator.h_values(src, points)
        cost = evaluator.cost_model.cost(src, points)
        return hv, cost

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, sources))
    else:
        out = [one(s) for s in sources]
    hv = np.concatenate([o[0] for o in out])
    cost = np.concatenate([o[1] for o in out])
    src = np.repeat(np.asarray(sources, dtype=int), points.shape[0])
    X = np.tile(points, (len(sources), 1))
    return src, X, hv, cost


def _best_enumerated(src, X, hv, cost) -> int:
    value = hv / cost
    # lexsort: last key is primary
    keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)] + [src, cost, -value]
    return int(np.lexsort(keys)[0])


def _ascend(evaluator: CkgEvaluator, source: int, x0, box, max_iter: int):
    box = np.asarray(box, dtype=float)
    width = box[:, 1] - box[:, 0]
    step = fd_step(box)
    xtol = 1e-6 * width
    state = {"prev": np.asarray(x0, dtype=float)}

    def fun(x):
        v, g = evaluator.value_and_gradient(source, x, step)
        return -v, -g

    def stop(intermediate_result):
        x = intermediate_result.x
        if np.all(np.abs(x - state["prev"]) < xtol):
            raise StopIteration
        state["prev"] = x.copy()

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=box,
                   callback=stop, options={"maxiter": max_iter})
    x = np.clip(res.x, box[:, 0], box[:, 1])
    return x, float(evaluator.values(source, x[None])[0])


def next_sample(
    state: PosteriorState,
    A,
    cost_model: CostNoiseModel,
    strategy: str = MULTISTART,
    *,
    box=None,
    sources: Optional[Sequence[int]] = None,
    restarts: int = 10,
    max_iter: int = 100,
    seed=None,
    workers: int = 1,
    h_workers: int = 1,
    tol: float = 1e-12,
) -> AcquisitionResult:
    """Choose the next ``(source, x)`` to query by maximizing the CKG.

    Parameters
    ----------
    strategy : {"multistart", "enumeration"}
        ``enumeration`` returns the exact argmax over ``sources x A`` (ties go
        to lower cost, then lower source, then lexicographically smaller x).
        ``multistart`` additionally runs ``restarts`` bounded quasi-Newton
        ascents per source from Latin hypercube starts and keeps the best,
        never returning less than the enumeration value.
    box : array_like, shape (d, 2), optional
        Domain of the outer search; defaults to the bounding box of ``A``.
    sources : sequence of int, optional
        Sources that may be queried (e.g. those still affordable).
    workers, h_workers : int
        Threads across sources and inside each ``h`` evaluation.
    """
    strategy = canonical_strategy(strategy)
    points = _targets(A)
    if sources is None:
        sources = range(state.kernel.n_sources)
    sources = [int(s) for s in sources]
    if not sources:
        raise ValueError("no source available to query")
    if box is None:
        box = np.column_stack([points.min(axis=0), points.max(axis=0)])
    box = np.asarray(box, dtype=float)

    evaluator = CkgEvaluator(state, points, cost_model, h_workers=h_workers)
    src, X, hv, cost = _enumerate(evaluator, points, sources, workers)
    k = _best_enumerated(src, X, hv, cost)
    best = AcquisitionResult(int(src[k]), X[k].copy(), float(hv[k] / cost[k]), float(hv[k]),
                             float(cost[k]), details={"strategy": ENUMERATION})
    enum_value = best.ckg

    if strategy == MULTISTART:
        rng = np.random.default_rng(seed)
        for s in sources:
            starts = lhs_points(restarts, box, rng)
            for x0 in starts:
                x, value = _ascend(evaluator, s, x0, box, max_iter)
                if value > best.ckg:
                    r = evaluator.evaluate(s, x)
                    best = AcquisitionResult(r.source, r.x, r.ckg, r.h_value, r.cost,
                                             details={"strategy": MULTISTART})
        best.details["enumeration_ckg"] = enum_value

    if best.ckg <= tol:
        k_src, k_x = int(src[k]), X[k].copy()
        return AcquisitionResult(k_src, k_x, float(hv[k] / cost[k]), float(hv[k]), float(cost[k]),
                                 no_improvement=True, details={"strategy": ENUMERATION})
    return best
