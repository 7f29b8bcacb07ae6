"""MAP estimation of kernel hyperparameters from an initial design.

The truth kernel is fitted to the truth-source observations and each
discrepancy kernel to the differences ``IS_l(x) - IS_0(x)`` on the shared
initial design. Every hyperparameter gets a normal prior whose standard
deviation is half its mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .costs import CostNoiseModel
from .kernel import (
    DEFAULT_JITTER,
    SQUARED_EXPONENTIAL,
    BaseKernel,
    MeanFunction,
    MisoKernel,
    canonical_family,
    noise_with_jitter,
)

log = logging.getLogger(__name__)

SIGNAL_VARIANCE_FLOOR = 1e-6
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class BlockPrior:
    """Normal priors for ``[ls_1, ..., ls_d, signal_variance]`` of one kernel."""

    mean: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        if np.any(m <= 0):
            raise ValueError("prior means of length scales and signal variances must be positive")
        object.__setattr__(self, "mean", m)

    @property
    def std(self) -> np.ndarray:
        return self.mean / 2.0

    @property
    def variance(self) -> np.ndarray:
        return self.std ** 2

    def log_density(self, theta: np.ndarray) -> float:
        z = (theta - self.mean) / self.std
        return float(-0.5 * z @ z - np.log(self.std).sum() - 0.5 * z.size * np.log(2 * np.pi))


@dataclass(frozen=True)
class HyperPrior:
    """Block 0 is the truth kernel; block ``l`` the discrepancy of source ``l``."""

    blocks: tuple

    def to_dict(self) -> dict:
        return {"prior_means": [b.mean.tolist() for b in self.blocks]}


@dataclass
class DifferenceDataset:
    """All sources evaluated on one shared design.

    Parameters
    ----------
    X : ndarray, shape (n, d)
    values : ndarray, shape (M + 1, n)
        ``values[l, i]`` is the observation of source ``l`` at ``X[i]``.
    noise : ndarray, shape (M + 1, n)
        Observation noise variances.
    """

    X: np.ndarray
    values: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), self.values.shape).copy()
        if self.values.shape[1] != self.X.shape[0]:
            raise ValueError("every source must be observed at every design point")

    @property
    def n_sources(self) -> int:
        return self.values.shape[0]

    @property
    def truth(self) -> np.ndarray:
        return self.values[0]

    @property
    def deltas(self) -> np.ndarray:
        return self.values[1:] - self.values[0]


def build_priors(data: DifferenceDataset, box, noise: Optional[CostNoiseModel] = None) -> HyperPrior:
    """Prior means from the initial data.

    Length scales: the width of the box along each dimension. Truth signal
    variance: sample variance of the truth observations minus their mean
    noise. Discrepancy signal variance: sample variance of the differences
    minus the mean noise of both sources involved. Signal variances are
    floored at ``1e-6``.
    """
    if data.X.shape[0] < 2:
        raise ValueError("need at least 2 initial design points to build priors")
    box = np.asarray(box, dtype=float)
    widths = box[:, 1] - box[:, 0]
    if noise is not None:
        lam = np.array([noise.noise(s, data.X).mean() for s in range(data.n_sources)])
    else:
        lam = data.noise.mean(axis=1)
    blocks = []
    sv0 = np.var(data.truth, ddof=1) - lam[0]
    blocks.append(BlockPrior(np.append(widths, max(sv0, SIGNAL_VARIANCE_FLOOR))))
    for ell, delta in enumerate(data.deltas, start=1):
        sv = np.var(delta, ddof=1) - lam[ell] - lam[0]
        blocks.append(BlockPrior(np.append(widths, max(sv, SIGNAL_VARIANCE_FLOOR))))
    return HyperPrior(tuple(blocks))


def _kernel_and_grads(family: str, X: np.ndarray, log_params: np.ndarray):
    """Kernel matrix and its derivatives with respect to each log-parameter."""
    ls = np.exp(log_params[:-1])
    sv = np.exp(log_params[-1])
    Xs = X / ls
    r2 = cdist(Xs, Xs, "sqeuclidean")
    # per-dimension scaled squared distances
    sq = (Xs[:, None, :] - Xs[None, :, :]) ** 2
    if family == SQUARED_EXPONENTIAL:
        K = sv * np.exp(-0.5 * r2)
        dK_ls = K[:, :, None] * sq
    else:
        r = np.sqrt(r2)
        e = np.exp(-_SQRT5 * r)
        K = sv * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * e
        dK_ls = (sv * (5.0 / 3.0) * (1.0 + _SQRT5 * r) * e)[:, :, None] * sq
    grads = [dK_ls[:, :, j] for j in range(ls.size)] + [K.copy()]
    return K, grads


def block_objective(log_params, family: str, X, y, noise, prior: Optional[BlockPrior]):
    """Log marginal likelihood plus log prior and its gradient in log-parameters."""
    K, grads = _kernel_and_grads(family, X, log_params)
    K[np.diag_indices_from(K)] += noise
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(log_params)
    alpha = cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(y.size))
    grad = np.array([0.5 * np.sum(W * G) for G in grads])
    if prior is not None:
        theta = np.exp(log_params)
        value += prior.log_density(theta)
        grad += -(theta - prior.mean) / prior.variance * theta
    return float(value), grad


@dataclass
class BlockFit:
    log_params: np.ndarray
    objective: float
    start_objectives: List[float]
    converged: bool


@dataclass
class FitResult:
    kernel: MisoKernel
    mean: MeanFunction
    blocks: List[BlockFit]
    converged: bool
    priors: Optional[HyperPrior] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "kernel": self.kernel.to_dict(),
            "mean": self.mean.constant,
            "converged": self.converged,
            "objectives": [b.objective for b in self.blocks],
        }
        if self.priors is not None:
            out.update(self.priors.to_dict())
        return out


def _fit_block(family, X, y, noise, prior: BlockPrior, use_prior: bool, restarts: int,
               rng: np.random.Generator, box_widths: np.ndarray, scale: float) -> BlockFit:
    d = X.shape[1]
    lower = np.append(np.log(1e-3 * box_widths), np.log(1e-12 * scale))
    upper = np.append(np.log(1e2 * box_widths), np.log(1e4 * scale))
    bounds = list(zip(lower, upper))
    used_prior = prior if use_prior else None

    def neg(p):
        v, g = block_objective(p, family, X, y, noise, used_prior)
        if not np.isfinite(v):
            return 1e300, np.zeros_like(p)
        return -v, -g

    starts = [np.clip(np.log(prior.mean), lower, upper)]
    for _ in range(max(restarts - 1, 0)):
        starts.append(rng.uniform(lower, upper))
    best_p, best_v, start_values, any_ok = None, -np.inf, [], False
    for p0 in starts:
        v0 = -neg(p0)[0]
        start_values.append(v0)
        res = minimize(neg, p0, jac=True, method="L-BFGS-B", bounds=bounds)
        any_ok |= bool(res.success)
        v = -float(res.fun)
        if v < v0:
            res.x, v = p0, v0
        if v > best_v:
            best_p, best_v = np.asarray(res.x, dtype=float), v
    return BlockFit(best_p, best_v, start_values, any_ok)


def fit_map(
    data: DifferenceDataset,
    priors: HyperPrior,
    *,
    family: str = SQUARED_EXPONENTIAL,
    box=None,
    use_prior: bool = True,
    restarts: int = 5,
    seed=0,
    jitter: float = DEFAULT_JITTER,
) -> FitResult:
    """Fit the truth and discrepancy kernels block by block.

    Each block maximizes its log marginal likelihood plus the log prior
    density (``use_prior=False`` gives maximum likelihood) with a seeded
    multistart L-BFGS-B in log-parameter space. The first start is the prior
    mean. The mean constant is the average of the truth observations.
    """
    family = canonical_family(family)
    X = data.X
    if box is None:
        box = np.column_stack([X.min(axis=0), X.max(axis=0)])
    box = np.asarray(box, dtype=float)
    widths = box[:, 1] - box[:, 0]
    rng = np.random.default_rng(seed)
    mean = float(np.mean(data.truth))
    noise0 = data.noise[0]

    targets = [(data.truth - mean, noise_with_jitter(noise0, jitter))]
    for ell, delta in enumerate(data.deltas, start=1):
        targets.append((delta, noise_with_jitter(noise0 + data.noise[ell], jitter)))

    blocks = []
    for prior, (y, nz) in zip(priors.blocks, targets):
        scale = max(float(np.var(y)), float(prior.mean[-1]), SIGNAL_VARIANCE_FLOOR)
        blocks.append(_fit_block(family, X, y, nz, prior, use_prior, restarts,
                                 np.random.default_rng(rng.integers(2**63)), widths, scale))
    converged = all(b.converged for b in blocks)
    if not converged:
        log.warning("hyperparameter optimizer did not report convergence for every block")
    kernels = [BaseKernel.from_log_params(family, b.log_params) for b in blocks]
    return FitResult(MisoKernel(kernels[0], kernels[1:]), MeanFunction(mean), blocks, converged, priors)


def estimate_constant_cost_noise(repeats: Sequence[np.ndarray], costs: Sequence[np.ndarray]) -> CostNoiseModel:
    """Constant cost and noise per source from repeated samples.

    ``repeats[l]`` has shape (n_points, n_repeats): repeated observations of
    source ``l`` at a few designs. The noise estimate is the mean of the
    per-point sample variances; the cost estimate is the mean observed cost.
    """
    noises = []
    for r in repeats:
        r = np.atleast_2d(np.asarray(r, dtype=float))
        if r.shape[1] < 2:
            raise ValueError("need at least 2 repeats per point to estimate noise")
        noises.append(float(np.mean(np.var(r, axis=1, ddof=1))))
    mean_costs = [float(np.mean(c)) for c in costs]
    return CostNoiseModel.constant(mean_costs, noises)
