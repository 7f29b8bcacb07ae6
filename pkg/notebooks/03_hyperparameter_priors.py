"""
Priors and MAP fits for the kernel hyperparameters
==================================================

Every source is evaluated on one shared design. The truth block is fitted to
the truth-source values and each discrepancy block to the differences
between a source and the truth. The priors are centred on simple
statistics of that data.
"""

# %%
import numpy as np

from misokg.acquisition import lhs_points
from misokg.hyper import DifferenceDataset, build_priors, fit_map
from misokg.kernel import BaseKernel

rng = np.random.default_rng(1)
box = np.array([[0.0, 50.0]])
X = lhs_points(40, box, rng)
K = BaseKernel("se", [0.7], 2.0)(X, X) + 1e-4 * np.eye(40)
truth = np.linalg.cholesky(K) @ rng.standard_normal(40)
cheap = truth + 0.3 * np.sin(X[:, 0] / 5.0)

data = DifferenceDataset(X, np.vstack([truth, cheap]), np.full((2, 40), 1e-4))
priors = build_priors(data, box)
print("prior means per block:", [np.round(b.mean, 3) for b in priors.blocks])

# %%
fit = fit_map(data, priors, box=box, seed=0)
print("truth kernel:", fit.kernel.sigma0.length_scales, fit.kernel.sigma0.signal_variance)
print("discrepancy kernel:", fit.kernel.discrepancy[0].length_scales,
      fit.kernel.discrepancy[0].signal_variance)

# %% [markdown]
# Switching the priors off gives the maximum-likelihood fit.

# %%
mle = fit_map(data, priors, box=box, seed=0, use_prior=False)
print("MLE truth kernel:", mle.kernel.sigma0.length_scales, mle.kernel.sigma0.signal_variance)
