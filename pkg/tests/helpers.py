"""Small builders shared by the test modules."""

import numpy as np

from oracles import joint_paths, partial_paths
from rotfda.designs import AllocationTrace, DesignSpec, SamplePath, validate_design
from rotfda.population import FunctionalPopulation, TimeGrid


def block_pop(strata_sizes, T=None, points=None, values=None, seed=0):
    """Population with the given stratum sizes (labels ``s0, s1, ...`` in blocks)."""
    points = points or 5
    T = T or float(points - 1)
    g = TimeGrid.uniform(T, points)
    labels = [f"s{h}" for h, n in enumerate(strata_sizes) for _ in range(n)]
    if values is None:
        values = np.random.default_rng(seed).normal(size=(len(labels), points))
    return FunctionalPopulation(g, np.asarray(values, dtype=float), labels)


def make_design(pop, kind, sizes, alpha=0.0, taus=None, m=None, **kw):
    """Validated design with ``sizes`` either per-stratum constants or a full ``(m+1, H)`` trace."""
    sizes = np.asarray(sizes)
    if taus is None:
        m = m if m is not None else (sizes.shape[0] - 1 if sizes.ndim == 2 else 1)
        spec = DesignSpec.uniform(kind, pop.grid.T, m, alpha, **kw)
    else:
        spec = DesignSpec(kind, tuple(taus), alpha, **kw)
    trace = AllocationTrace(sizes) if sizes.ndim == 2 else AllocationTrace.constant(sizes, spec.m)
    return validate_design(spec, trace, pop)


def oracle_paths(design, full=False):
    """All joint sample paths from the independent set-based enumerator."""
    per = []
    for h in range(design.H):
        sizes = design.sizes[:, h].tolist()
        per.append(partial_paths(int(design.strata_sizes[h]), sizes, design.discards[:, h].tolist(), full=full))
    out = []
    for p, paths in joint_paths(per):
        masks = np.zeros((design.m + 1, design.N), dtype=bool)
        for h, path in enumerate(paths):
            idx = design.members[h]
            for r, s in enumerate(path):
                masks[r, idx[sorted(s)]] = True
        out.append((p, SamplePath(design, masks, design.sizes.copy())))
    return out
