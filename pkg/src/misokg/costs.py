"""Per-source query cost and observation-noise models."""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

Spec = Union[float, Callable[[np.ndarray], np.ndarray]]


def _evaluate(spec: Spec, X: np.ndarray) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(X), dtype=float).reshape(X.shape[0])
    return np.full(X.shape[0], float(spec))


class CostNoiseModel:
    """Cost ``c_l(x)`` and noise variance ``lambda_l(x)`` for each source.

    Each entry is either a constant or a callable mapping an ``(m, d)`` array
    of designs to ``m`` values.
    """

    def __init__(self, costs: Sequence[Spec], noises: Sequence[Spec]):
        if len(costs) != len(noises) or not costs:
            raise ValueError("need one cost and one noise entry per source")
        for c in costs:
            if not callable(c) and not float(c) > 0:
                raise ValueError(f"costs must be strictly positive, got {c}")
        for v in noises:
            if not callable(v) and not float(v) >= 0:
                raise ValueError(f"noise variances must be non-negative, got {v}")
        self.costs = tuple(costs)
        self.noises = tuple(noises)

    @classmethod
    def constant(cls, costs: Sequence[float], noises: Sequence[float]) -> "CostNoiseModel":
        return cls([float(c) for c in costs], [float(v) for v in noises])

    @property
    def n_sources(self) -> int:
        return len(self.costs)

    @property
    def is_constant(self) -> bool:
        return not any(callable(s) for s in self.costs + self.noises)

    def _check_source(self, source: int) -> int:
        if not 0 <= int(source) < self.n_sources:
            raise ValueError(f"source {source} out of range 0..{self.n_sources - 1}")
        return int(source)

    def cost(self, source: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = _evaluate(self.costs[self._check_source(source)], X)
        if np.any(c <= 0):
            raise ValueError(f"non-positive cost for source {source}")
        return c

    def noise(self, source: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _evaluate(self.noises[self._check_source(source)], X)

    def scaled(self, factor: float) -> "CostNoiseModel":
        """Same noise, every cost multiplied by ``factor``."""
        if not factor > 0:
            raise ValueError("factor must be positive")
        costs = [
            (lambda X, c=c: factor * _evaluate(c, X)) if callable(c) else factor * float(c)
            for c in self.costs
        ]
        return CostNoiseModel(costs, self.noises)

    def to_dict(self) -> dict:
        def enc(s):
            return "callable" if callable(s) else float(s)
        return {"costs": [enc(c) for c in self.costs], "noises": [enc(v) for v in self.noises]}

    def __repr__(self) -> str:
        return f"CostNoiseModel(costs={self.to_dict()['costs']}, noises={self.to_dict()['noises']})"
