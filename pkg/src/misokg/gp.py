"""Exact Gaussian process posterior over the augmented space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernel import DEFAULT_JITTER, MeanFunction, MisoKernel, gram, noise_with_jitter


class NumericalConditioningError(np.linalg.LinAlgError):
    """Raised when a Gram matrix cannot be factorized even after jitter."""

    def __init__(self, message: str, index: Optional[int] = None, observation=None):
        super().__init__(message)
        self.index = index
        self.observation = observation


@dataclass(frozen=True)
class Observation:
    source: int
    x: np.ndarray
    y: float
    noise_var: float = 0.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite design {x}")
        if not np.isfinite(self.noise_var) or self.noise_var < 0:
            raise ValueError(f"noise variance must be finite and >= 0, got {self.noise_var}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "source", int(self.source))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "noise_var", float(self.noise_var))


class PosteriorState:
    """GP conditioned on a list of observations of ``f(source, x)``.

    The state is immutable: :meth:`update` returns a new state whose Cholesky
    factor extends the current one by a single row.

    Parameters
    ----------
    kernel : MisoKernel
    mean : MeanFunction
    sources, X, y, noise : array_like, optional
        Training data; ``noise`` holds the observation variances.
    jitter : float
        Diagonal term used in place of a zero noise variance.
    """

    def __init__(
        self,
        kernel: MisoKernel,
        mean: MeanFunction,
        sources=None,
        X=None,
        y=None,
        noise=None,
        jitter: float = DEFAULT_JITTER,
    ):
        self.kernel = kernel
        self.mean_function = mean
        self.jitter = float(jitter)
        d = kernel.dim
        if X is None or len(X) == 0:
            self.sources = np.zeros(0, dtype=int)
            self.X = np.zeros((0, d))
            self.y = np.zeros(0)
            self.noise = np.zeros(0)
            self.chol = np.zeros((0, 0))
            self._z = np.zeros(0)
            return
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        self.sources = kernel._sources(sources, n)
        self.X = X
        self.y = np.asarray(y, dtype=float).reshape(n)
        self.noise = np.asarray(noise, dtype=float).reshape(n)
        G = gram(kernel, self.sources, X, self.noise, self.jitter)
        try:
            self.chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            self._raise_failing_row(G)
        self._z = solve_triangular(self.chol, self.y - mean(self.sources, X), lower=True)

    def _raise_failing_row(self, G):
        for i in range(1, G.shape[0] + 1):
            try:
                np.linalg.cholesky(G[:i, :i])
            except np.linalg.LinAlgError:
                obs = self.observations[i - 1]
                raise NumericalConditioningError(
                    f"Gram matrix not positive definite at observation {i - 1} "
                    f"(source={obs.source}, x={obs.x.tolist()})",
                    index=i - 1, observation=obs) from None
        raise NumericalConditioningError("Gram matrix not positive definite")

    @classmethod
    def from_observations(cls, kernel, mean, observations: Sequence[Observation],
                          jitter: float = DEFAULT_JITTER) -> "PosteriorState":
        if not observations:
            return cls(kernel, mean, jitter=jitter)
        return cls(
            kernel, mean,
            [o.source for o in observations],
            np.array([o.x for o in observations]),
            [o.y for o in observations],
            [o.noise_var for o in observations],
            jitter=jitter,
        )

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def observations(self) -> List[Observation]:
        return [Observation(s, x, y, v) for s, x, y, v in zip(self.sources, self.X, self.y, self.noise)]

    @property
    def alpha(self) -> np.ndarray:
        """``(K + noise)^{-1} (y - mu)``."""
        if self.n == 0:
            return np.zeros(0)
        return solve_triangular(self.chol.T, self._z, lower=False)

    def prior(self) -> "PosteriorState":
        return PosteriorState(self.kernel, self.mean_function, jitter=self.jitter)

    def whitened_cross(self, sources, X) -> np.ndarray:
        """``L^{-1} K(train, points)``, shape (n, m)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n == 0:
            return np.zeros((0, X.shape[0]))
        Kx = self.kernel.matrix(self.sources, self.X, sources, X)
        return solve_triangular(self.chol, Kx, lower=True)

    def mean(self, sources, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = self.mean_function(sources, X)
        if self.n == 0:
            return mu
        return mu + self.whitened_cross(sources, X).T @ self._z

    def cov(self, sources1, X1, sources2, X2) -> np.ndarray:
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        K = self.kernel.matrix(sources1, X1, sources2, X2)
        if self.n == 0:
            return K
        return K - self.whitened_cross(sources1, X1).T @ self.whitened_cross(sources2, X2)

    def variance(self, sources, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        var = self.kernel.diag(sources, X)
        if self.n:
            V = self.whitened_cross(sources, X)
            var = var - np.einsum("ij,ij->j", V, V)
        return np.maximum(var, 0.0)

    def posterior_mean(self, p) -> float:
        source, x = p
        return float(self.mean([source], np.atleast_1d(x)[None])[0])

    def posterior_cov(self, p, q) -> float:
        (l, x), (m, xp) = p, q
        value = float(self.cov([l], np.atleast_1d(x)[None], [m], np.atleast_1d(xp)[None])[0, 0])
        if l == m and np.array_equal(np.asarray(x), np.asarray(xp)):
            value = max(value, 0.0)
        return value

    def update(self, obs: Observation) -> "PosteriorState":
        """Condition on one more observation by extending the Cholesky factor."""
        x = obs.x.reshape(1, -1)
        if x.shape[1] != self.dim:
            raise ValueError(f"observation has dimension {x.shape[1]}, expected {self.dim}")
        new = object.__new__(PosteriorState)
        new.kernel = self.kernel
        new.mean_function = self.mean_function
        new.jitter = self.jitter
        s = np.array([obs.source])
        k_nn = self.kernel.diag(s, x)[0] + noise_with_jitter(obs.noise_var, self.jitter)
        resid = obs.y - self.mean_function(s, x)[0]
        n = self.n
        if n:
            l = self.whitened_cross(s, x)[:, 0]
            d2 = k_nn - l @ l
        else:
            l = np.zeros(0)
            d2 = k_nn
        if not d2 > 0 or not np.isfinite(d2):
            raise NumericalConditioningError(
                f"rank-one update failed for observation source={obs.source}, x={obs.x.tolist()} "
                f"(Schur complement {d2:.3g})", index=n, observation=obs)
        dnn = np.sqrt(d2)
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self.chol
        L[n, :n] = l
        L[n, n] = dnn
        new.chol = L
        new._z = np.append(self._z, (resid - l @ self._z) / dnn)
        new.sources = np.append(self.sources, obs.source)
        new.X = np.vstack([self.X, x])
        new.y = np.append(self.y, obs.y)
        new.noise = np.append(self.noise, obs.noise_var)
        return new

    def sigma_tilde(self, candidate, candidate_noise: float, target_sources, target_X) -> np.ndarray:
        """Sensitivity of the target posterior means to observing ``candidate``.

        Entry ``i`` is ``Cov_n[f(t_i), f(c)] / sqrt(noise_c + Var_n[f(c)])`` so
        that after the observation the mean at ``t_i`` is ``mu_n(t_i) + s_i Z``
        with ``Z ~ N(0, 1)``. A zero ``candidate_noise`` is replaced by the
        state's jitter, as it would be when the observation is added.
        """
        source, x = candidate
        x = np.atleast_1d(np.asarray(x, dtype=float))[None]
        cov = self.cov(target_sources, target_X, [source], x)[:, 0]
        var = self.kernel.diag([source], x)[0]
        if self.n:
            v = self.whitened_cross([source], x)[:, 0]
            var -= v @ v
        denom = noise_with_jitter(candidate_noise, self.jitter) + max(var, 0.0)
        if not denom > 0:
            raise NumericalConditioningError(
                f"predictive variance {denom:.3g} at candidate source={source} is not positive")
        return cov / np.sqrt(denom)

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        return float(-0.5 * self._z @ self._z - np.log(np.diag(self.chol)).sum()
                     - 0.5 * self.n * np.log(2 * np.pi))

    def solve(self, b) -> np.ndarray:
        return cho_solve((self.chol, True), b)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "mean": self.mean_function.constant,
            "jitter": self.jitter,
            "observations": [
                {"source": int(o.source), "x": o.x.tolist(), "y": o.y, "noise_var": o.noise_var}
                for o in self.observations
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PosteriorState":
        obs = [Observation(o["source"], o["x"], o["y"], o["noise_var"]) for o in data["observations"]]
        return cls.from_observations(MisoKernel.from_dict(data["kernel"]), MeanFunction(data["mean"]),
                                     obs, jitter=data.get("jitter", DEFAULT_JITTER))


def posterior_mean(s: PosteriorState, p) -> float:
    return s.posterior_mean(p)


def posterior_cov(s: PosteriorState, p, q) -> float:
    return s.posterior_cov(p, q)


def update(s: PosteriorState, obs: Observation) -> PosteriorState:
    return s.update(obs)


def sigma_tilde(s: PosteriorState, candidate, candidate_noise, targets) -> np.ndarray:
    sources = [t[0] for t in targets]
    X = np.array([np.atleast_1d(t[1]) for t in targets], dtype=float)
    return s.sigma_tilde(candidate, candidate_noise, sources, X)
