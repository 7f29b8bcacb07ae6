"""Random problem builders shared by the test modules."""

from __future__ import annotations

from misokg.kernel import BaseKernel, MisoKernel


def random_spec(rng, d, n_sources, family="se", groups=False, alpha=False):
    """Random composite-kernel description usable by both the package and the oracles."""
    spec = {
        "family": family,
        "sigma0": (tuple(rng.uniform(0.3, 2.0, d)), float(rng.uniform(0.5, 2.0))),
        "disc": [(tuple(rng.uniform(0.3, 2.0, d)), float(rng.uniform(0.05, 1.0)))
                 for _ in range(n_sources - 1)],
        "alpha": [float(v) for v in rng.uniform(0.5, 2.0, n_sources - 1)] if alpha else None,
        "groups": None,
        "group_kernels": [],
    }
    if groups and n_sources > 2:
        q = int(rng.integers(1, n_sources - 1))
        spec["groups"] = [None] + [int(g) for g in rng.integers(0, q, n_sources - 1)]
        spec["group_kernels"] = [(tuple(rng.uniform(0.3, 2.0, d)), float(rng.uniform(0.05, 1.0)))
                                 for _ in range(q)]
    return spec


def kernel_from_spec(spec) -> MisoKernel:
    fam = spec["family"]
    return MisoKernel(
        BaseKernel(fam, *spec["sigma0"]),
        [BaseKernel(fam, *p) for p in spec["disc"]],
        groups=spec["groups"],
        group_kernels=[BaseKernel(fam, *p) for p in spec["group_kernels"]],
        fidelity_coeffs=spec["alpha"],
    )
