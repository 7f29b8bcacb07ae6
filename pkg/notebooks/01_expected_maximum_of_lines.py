"""
Expected maximum of random lines
================================

The knowledge-gradient value of one more sample reduces to
``h(a, b) = E[max_i a_i + b_i Z] - max_i a_i`` with ``Z`` standard normal.
This script walks through the envelope computation and checks it against
brute-force sampling.
"""

# %%
import numpy as np

from misokg.acquisition import envelope, h, h_parallel

rng = np.random.default_rng(0)

# %% [markdown]
# Two alternatives with equal means and one slope of 1: the expected gain is
# E[max(0, Z)], the standard normal density at zero.

# %%
print("h((0, 0), (0, 1)) =", h([0.0, 0.0], [0.0, 1.0]))
print("1/sqrt(2 pi)      =", 1 / np.sqrt(2 * np.pi))

# %% [markdown]
# Most lines never reach the upper envelope. Only the survivors contribute.

# %%
a, b = rng.normal(size=30), rng.normal(size=30)
ea, eb = envelope(a, b)
print(f"{len(ea)} of {len(a)} lines form the envelope; slopes {np.round(eb, 3)}")

# %%
z = rng.standard_normal(200_000)
mc = np.max(a[:, None] + b[:, None] * z[None, :], axis=0)
print("closed form :", h(a, b))
print("Monte Carlo :", mc.mean() - a.max(), "+-", mc.std() / np.sqrt(mc.size))

# %% [markdown]
# Long inputs can be split into blocks whose envelopes are merged; the result
# is identical to the sequential scan.

# %%
a, b = rng.normal(size=4096), rng.normal(size=4096)
for workers in (1, 2, 4, 8):
    print(workers, h_parallel(a, b, workers) - h(a, b))
