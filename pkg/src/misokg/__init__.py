"""Multi-information-source Bayesian optimization with a cost-sensitive knowledge gradient.

One Gaussian process over (source, design) pairs models the objective and
the bias of every cheaper approximation. Each step queries the pair with the
largest expected one-step gain in the best posterior mean per unit cost.
"""

from __future__ import annotations

from .acquisition import (
    AcquisitionResult,
    CkgEvaluator,
    DiscreteCandidateSet,
    ckg,
    h,
    h_parallel,
    latin_hypercube,
    next_sample,
)
from .bench import BenchmarkProblem, ato_synthetic, get_problem, rosenbrock_miso, two_source_analytic
from .costs import CostNoiseModel
from .gp import NumericalConditioningError, Observation, PosteriorState
from .hyper import DifferenceDataset, HyperPrior, build_priors, fit_map
from .kernel import BaseKernel, MeanFunction, MisoKernel
from .loop import Budget, Record, RunConfig, RunResult, recommend, run

__version__ = "0.1.0"

__all__ = [
    "AcquisitionResult", "BaseKernel", "BenchmarkProblem", "Budget", "CkgEvaluator",
    "CostNoiseModel", "DifferenceDataset", "DiscreteCandidateSet", "HyperPrior", "MeanFunction",
    "MisoKernel", "NumericalConditioningError", "Observation", "PosteriorState", "Record",
    "RunConfig", "RunResult", "ato_synthetic", "build_priors", "ckg", "fit_map", "get_problem",
    "h", "h_parallel", "latin_hypercube", "next_sample", "recommend", "rosenbrock_miso", "run",
    "two_source_analytic",
]
