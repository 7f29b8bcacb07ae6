"""Covariance kernels and mean functions over the augmented space.

An augmented point is a pair ``(source, x)`` where ``source`` indexes an
information source (0 is the unbiased truth) and ``x`` is a design vector.
The composite kernel couples all sources through the truth kernel and adds a
per-source discrepancy term (plus an optional shared term for groups of
sources whose discrepancies are correlated).
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

SQUARED_EXPONENTIAL = "se"
MATERN52 = "matern52"
FAMILIES = (SQUARED_EXPONENTIAL, MATERN52)

_FAMILY_ALIASES = {
    "se": SQUARED_EXPONENTIAL,
    "squaredexponential": SQUARED_EXPONENTIAL,
    "squared_exponential": SQUARED_EXPONENTIAL,
    "rbf": SQUARED_EXPONENTIAL,
    "matern52": MATERN52,
    "matern": MATERN52,
}

# Added to Gram diagonals where the supplied noise variance is exactly zero.
DEFAULT_JITTER = 1e-6

_SQRT5 = np.sqrt(5.0)


def canonical_family(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace(" ", "")
    if key not in _FAMILY_ALIASES:
        raise ValueError(f"unknown kernel family {name!r}; expected one of {FAMILIES}")
    return _FAMILY_ALIASES[key]


class AugmentedPoint(NamedTuple):
    source: int
    x: np.ndarray


class BaseKernel:
    """Stationary kernel on designs with per-dimension length scales.

    Parameters are stored as logarithms so positivity holds by construction;
    the constructor and the public properties use natural units.

    Parameters
    ----------
    family : {"se", "matern52"}
        Squared exponential or Matern 5/2.
    length_scales : array_like, shape (d,)
        Positive length scale per design dimension.
    signal_variance : float
        Positive kernel amplitude, ``k(x, x)``.
    """

    __slots__ = ("family", "_log_ls", "_log_sv")

    def __init__(self, family: str, length_scales, signal_variance: float):
        ls = np.atleast_1d(np.asarray(length_scales, dtype=float))
        if ls.ndim != 1 or ls.size == 0:
            raise ValueError("length_scales must be a non-empty vector")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError(f"length scales must be positive and finite, got {ls}")
        if not np.isfinite(signal_variance) or signal_variance <= 0:
            raise ValueError(f"signal variance must be positive, got {signal_variance}")
        object.__setattr__(self, "family", canonical_family(family))
        object.__setattr__(self, "_log_ls", np.log(ls))
        object.__setattr__(self, "_log_sv", float(np.log(signal_variance)))
        self._log_ls.setflags(write=False)

    def __setattr__(self, name, value):
        raise AttributeError("BaseKernel is immutable")

    @classmethod
    def from_log_params(cls, family: str, log_params) -> "BaseKernel":
        """Build from ``[log ls_1, ..., log ls_d, log sv]``."""
        p = np.asarray(log_params, dtype=float)
        return cls(family, np.exp(p[:-1]), float(np.exp(p[-1])))

    @property
    def dim(self) -> int:
        return self._log_ls.size

    @property
    def length_scales(self) -> np.ndarray:
        return np.exp(self._log_ls)

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self._log_sv))

    @property
    def log_params(self) -> np.ndarray:
        return np.append(self._log_ls, self._log_sv)

    def _scaled_sqdist(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        ls = self.length_scales
        return cdist(X1 / ls, X2 / ls, "sqeuclidean")

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected designs of dimension {self.dim}, got shape {X.shape}")
        return X

    def __call__(self, X1, X2=None) -> np.ndarray:
        """Kernel matrix between the rows of ``X1`` and ``X2``."""
        X1 = self._check(X1)
        X2 = X1 if X2 is None else self._check(X2)
        r2 = self._scaled_sqdist(X1, X2)
        sv = self.signal_variance
        if self.family == SQUARED_EXPONENTIAL:
            return sv * np.exp(-0.5 * r2)
        r = np.sqrt(r2)
        return sv * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)

    def eval(self, x, x_prime) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
        if x.shape != (self.dim,) or x_prime.shape != (self.dim,):
            raise ValueError(
                f"dimension mismatch: kernel has d={self.dim}, got {x.shape} and {x_prime.shape}"
            )
        return float(self(x, x_prime)[0, 0])

    def grad_x(self, x, X2) -> np.ndarray:
        """Gradient of ``k(x, X2[j])`` with respect to ``x``; shape (n2, d)."""
        x = self._check(x)
        X2 = self._check(X2)
        ls2 = self.length_scales ** 2
        diff = (x - X2) / ls2
        r2 = self._scaled_sqdist(x, X2)[0]
        sv = self.signal_variance
        if self.family == SQUARED_EXPONENTIAL:
            return -(sv * np.exp(-0.5 * r2))[:, None] * diff
        r = np.sqrt(r2)
        scale = sv * (5.0 / 3.0) * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
        return -scale[:, None] * diff

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "length_scales": self.length_scales.tolist(),
            "signal_variance": self.signal_variance,
        }

    @classmethod
    def from_dict(cls, data: dict, family: Optional[str] = None) -> "BaseKernel":
        return cls(data.get("family", family or SQUARED_EXPONENTIAL),
                   data["length_scales"], float(data["signal_variance"]))

    def __repr__(self) -> str:
        ls = ", ".join(f"{v:.4g}" for v in self.length_scales)
        return f"BaseKernel({self.family}, ls=[{ls}], sv={self.signal_variance:.4g})"


class MeanFunction:
    """Constant prior mean shared by every source."""

    __slots__ = ("constant",)

    def __init__(self, constant: float = 0.0):
        object.__setattr__(self, "constant", float(constant))

    def __setattr__(self, name, value):
        raise AttributeError("MeanFunction is immutable")

    def __call__(self, sources, X) -> np.ndarray:
        n = np.atleast_2d(np.asarray(X, dtype=float)).shape[0]
        return np.full(n, self.constant)

    def __repr__(self) -> str:
        return f"MeanFunction({self.constant:.6g})"


class MisoKernel:
    """Composite covariance over ``(source, x)`` pairs.

    ``Sigma((l, x), (m, x')) = Sigma_0(x, x')
    + [group(l) == group(m)] * Sigma_group(l)(x, x')
    + [l == m] * alpha_l * Sigma_l(x, x')``

    Source 0 carries neither a discrepancy nor a group term.

    Parameters
    ----------
    sigma0 : BaseKernel
        Kernel of the truth ``f(0, .)``.
    discrepancy : sequence of BaseKernel
        One kernel per biased source ``1..M``.
    groups : sequence of int or None, optional
        Length ``M + 1``; ``groups[l]`` is the group of source ``l`` or None.
        ``groups[0]`` must be None.
    group_kernels : sequence of BaseKernel, optional
        Kernel per group id.
    fidelity_coeffs : sequence of float, optional
        Positive multipliers ``alpha_l`` of the discrepancy kernels, default 1.
    """

    def __init__(
        self,
        sigma0: BaseKernel,
        discrepancy: Sequence[BaseKernel] = (),
        groups: Optional[Sequence[Optional[int]]] = None,
        group_kernels: Sequence[BaseKernel] = (),
        fidelity_coeffs: Optional[Sequence[float]] = None,
    ):
        self.sigma0 = sigma0
        self.discrepancy = tuple(discrepancy)
        for k in self.discrepancy:
            if k.dim != sigma0.dim:
                raise ValueError("all kernels must share the design dimension")
        M = len(self.discrepancy)
        if fidelity_coeffs is None:
            alpha = np.ones(M)
        else:
            alpha = np.asarray(fidelity_coeffs, dtype=float)
            if alpha.shape != (M,) or np.any(alpha <= 0):
                raise ValueError(f"need {M} positive fidelity coefficients, got {fidelity_coeffs}")
        self.fidelity_coeffs = alpha
        self.group_kernels = tuple(group_kernels)
        if groups is None:
            if self.group_kernels:
                raise ValueError("group_kernels given without a group map")
            self.groups = None
        else:
            groups = tuple(None if g is None else int(g) for g in groups)
            if len(groups) != M + 1:
                raise ValueError(f"group map must cover sources 0..{M}, got {len(groups)} entries")
            if groups[0] is not None:
                raise ValueError("the truth source 0 cannot belong to a discrepancy group")
            for g in groups:
                if g is not None and not 0 <= g < len(self.group_kernels):
                    raise ValueError(f"group id {g} has no kernel")
            for k in self.group_kernels:
                if k.dim != sigma0.dim:
                    raise ValueError("all kernels must share the design dimension")
            self.groups = groups

    @property
    def n_sources(self) -> int:
        return len(self.discrepancy) + 1

    @property
    def dim(self) -> int:
        return self.sigma0.dim

    def _sources(self, sources, n: int) -> np.ndarray:
        s = np.asarray(sources, dtype=int)
        if s.ndim == 0:
            s = np.full(n, int(s))
        if s.shape != (n,):
            raise ValueError(f"expected {n} source indices, got shape {s.shape}")
        if s.size and (s.min() < 0 or s.max() >= self.n_sources):
            raise ValueError(f"source index out of range 0..{self.n_sources - 1}: {s}")
        return s

    def matrix(self, sources1, X1, sources2=None, X2=None) -> np.ndarray:
        """Covariance matrix between two lists of augmented points."""
        X1 = self.sigma0._check(X1)
        s1 = self._sources(sources1, X1.shape[0])
        if X2 is None:
            X2, s2 = X1, s1
        else:
            X2 = self.sigma0._check(X2)
            s2 = self._sources(sources2, X2.shape[0])
        K = self.sigma0(X1, X2)
        for ell in range(1, self.n_sources):
            rows = np.flatnonzero(s1 == ell)
            cols = np.flatnonzero(s2 == ell)
            if rows.size and cols.size:
                block = self.discrepancy[ell - 1](X1[rows], X2[cols])
                K[np.ix_(rows, cols)] += self.fidelity_coeffs[ell - 1] * block
        if self.groups is not None:
            gmap = np.array([-1 if g is None else g for g in self.groups])
            g1, g2 = gmap[s1], gmap[s2]
            for q, kern in enumerate(self.group_kernels):
                rows = np.flatnonzero(g1 == q)
                cols = np.flatnonzero(g2 == q)
                if rows.size and cols.size:
                    K[np.ix_(rows, cols)] += kern(X1[rows], X2[cols])
        return K

    def diag(self, sources, X) -> np.ndarray:
        X = self.sigma0._check(X)
        s = self._sources(sources, X.shape[0])
        out = np.full(X.shape[0], self.sigma0.signal_variance)
        for ell in range(1, self.n_sources):
            out[s == ell] += self.fidelity_coeffs[ell - 1] * self.discrepancy[ell - 1].signal_variance
        if self.groups is not None:
            for ell in range(1, self.n_sources):
                g = self.groups[ell]
                if g is not None:
                    out[s == ell] += self.group_kernels[g].signal_variance
        return out

    def eval(self, p, q) -> float:
        """Scalar covariance between two augmented points."""
        (l, x), (m, xp) = p, q
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xp = np.atleast_1d(np.asarray(xp, dtype=float))
        if x.shape != (self.dim,) or xp.shape != (self.dim,):
            raise ValueError("dimension mismatch")
        return float(self.matrix([l], x[None], [m], xp[None])[0, 0])

    def to_dict(self) -> dict:
        out = {
            "sigma0": self.sigma0.to_dict(),
            "discrepancy": [k.to_dict() for k in self.discrepancy],
            "fidelity_coeffs": self.fidelity_coeffs.tolist(),
        }
        if self.groups is not None:
            out["groups"] = list(self.groups)
            out["group_kernels"] = [k.to_dict() for k in self.group_kernels]
        return out

    @classmethod
    def from_dict(cls, data: dict, family: Optional[str] = None) -> "MisoKernel":
        return cls(
            BaseKernel.from_dict(data["sigma0"], family),
            [BaseKernel.from_dict(k, family) for k in data.get("discrepancy", [])],
            groups=data.get("groups"),
            group_kernels=[BaseKernel.from_dict(k, family) for k in data.get("group_kernels", [])],
            fidelity_coeffs=data.get("fidelity_coeffs"),
        )

    def __repr__(self) -> str:
        return f"MisoKernel(sigma0={self.sigma0!r}, M={len(self.discrepancy)})"


def eval_base(k: BaseKernel, x, x_prime) -> float:
    return k.eval(x, x_prime)


def eval_miso(K: MisoKernel, p, q) -> float:
    return K.eval(p, q)


def noise_with_jitter(noise, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    return np.where(noise == 0.0, jitter, noise)


def gram(K: MisoKernel, sources, X, noise, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Gram matrix of augmented points plus their noise on the diagonal.

    A zero noise variance is replaced by ``jitter`` on the diagonal.
    """
    noise = np.atleast_1d(np.asarray(noise, dtype=float))
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        if noise.size:
            raise ValueError("noise given for an empty point list")
        return np.zeros((0, 0))
    X = np.atleast_2d(X)
    if noise.shape != (X.shape[0],):
        raise ValueError("noise must have one entry per point")
    if np.any(noise < 0) or not np.all(np.isfinite(noise)):
        raise ValueError("noise variances must be finite and non-negative")
    G = K.matrix(sources, X)
    G[np.diag_indices_from(G)] += noise_with_jitter(noise, jitter)
    return G
