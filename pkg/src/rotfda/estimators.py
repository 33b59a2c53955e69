"""Horvitz-Thompson, change, composite and integral estimators of the mean curve.

The batch functions operate on per-epoch masks of shape ``(..., N)`` so that
whole blocks of Monte Carlo replications are estimated at once; the
single-path functions wrap them for a :class:`~rotfda.designs.SamplePath`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .designs import FULL, SamplePath, ValidatedDesign
from .errors import DegenerateOverlapError, EstimatorError, ValidationError
from .population import CurveSeries, FunctionalPopulation, TimeGrid


@dataclass(frozen=True, eq=False)
class EstimatorSeries:
    series: CurveSeries
    method: str
    params: dict = field(default_factory=dict)
    flags: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return self.series.values

    @property
    def grid(self) -> TimeGrid:
        return self.series.grid

    def to_csv(self, path: str | Path) -> None:
        flags = np.zeros(self.grid.size, dtype=bool) if self.flags is None else self.flags
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "value", "method", "flags"])
            for t, v, fl in zip(self.grid.t_points.tolist(), self.values.tolist(), flags.tolist()):
                w.writerow([repr(t), repr(v), self.method, "degenerate_overlap" if fl else ""])


# ---------------------------------------------------------------------------
# batch kernels


def unit_weights(design: ValidatedDesign, sizes: np.ndarray) -> np.ndarray:
    """HT weight ``N_h / (n_h N)`` of every unit, shape ``sizes.shape[:-1] + (N,)``."""
    sizes = np.asarray(sizes)
    if np.any(sizes <= 0):
        raise EstimatorError("HT estimator undefined: a stratum has no sampled unit")
    w = np.empty(sizes.shape[:-1] + (design.N,))
    for h, idx in enumerate(design.members):
        w[..., idx] = (idx.size / (sizes[..., h] * design.N))[..., None]
    return w


def ht_epoch(X: np.ndarray, design: ValidatedDesign, r: int, mask: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """HT estimate on the grid columns of epoch ``r``."""
    W = np.where(mask, unit_weights(design, sizes), 0.0)
    return W @ X[:, design.epoch_slice(r)]


def boundary_weights(design: ValidatedDesign, prev_mask, prev_sizes, mask, sizes):
    """Weights ``I_k(t) I_k(u) / (N pi_kk(t, u))`` for ``t, u`` on either side of one replacement.

    Returns ``(weights, degenerate)``; ``degenerate`` marks replications whose
    overlap is empty or where some stratum cannot retain units.
    """
    both = prev_mask & mask
    w = np.zeros(both.shape)
    degenerate = ~np.any(both, axis=-1)
    for h, idx in enumerate(design.members):
        Nh = idx.size
        if design.kind == FULL:
            pi = prev_sizes[..., h] * sizes[..., h] / (Nh * Nh)
        else:
            # partial and conventional rotation keep a deterministic number of units
            pi = both[..., idx].sum(axis=-1) / Nh
        zero = pi <= 0
        degenerate = degenerate | zero
        inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, pi))
        w[..., idx] = np.where(both[..., idx], (inv / design.N)[..., None], 0.0)
    return w, degenerate


@dataclass
class EpochEstimates:
    """HT values plus one-replacement change components for a batch of paths.

    ``ht`` has shape ``(..., G)``. For each replacement ``r = 1..m``,
    ``bprev[r-1]``/``bnext[r-1]`` hold ``(1/N) sum I_k I_k / pi_kk X_k(t)`` on the
    columns of epochs ``r - 1`` and ``r``; ``degenerate[r-1]`` flags empty overlaps.
    """

    design: ValidatedDesign
    ht: np.ndarray
    bprev: list
    bnext: list
    degenerate: list
    static: bool

    def change(self, j: int, i: int):
        """Change estimate between grid indices ``j <= i`` and its degenerate flag."""
        d = self.design
        e = d.epoch_of_grid
        a, b = int(e[j]), int(e[i])
        st = d.epoch_starts
        if a == b:
            return self.ht[..., i] - self.ht[..., j], np.zeros(self.ht.shape[:-1], dtype=bool)
        if b == a + 1:
            val = self.bnext[a][..., i - st[b]] - self.bprev[a][..., j - st[a]]
            return val, self.degenerate[a].copy()
        val = self.bnext[a][..., 0] - self.bprev[a][..., j - st[a]]
        flag = self.degenerate[a].copy()
        for r in range(a + 2, b + 1):
            val = val + (self.bnext[r - 1][..., 0] - self.bprev[r - 1][..., 0])
            flag |= self.degenerate[r - 1]
        val = val + (self.ht[..., i] - self.ht[..., st[b]])
        return val, flag


def epoch_estimates(pop: FunctionalPopulation, design: ValidatedDesign, epochs, need_change: bool = True) -> EpochEstimates:
    """Consume ``(r, mask, sizes)`` triples (as from :func:`iter_epochs`)."""
    X = pop.values
    ht = None
    bprev, bnext, degen = [], [], []
    prev = None
    static = True
    for r, mask, sizes in epochs:
        block = ht_epoch(X, design, r, mask, sizes)
        if ht is None:
            ht = np.empty(block.shape[:-1] + (design.grid.size,))
        ht[..., design.epoch_slice(r)] = block
        if prev is not None:
            pm, ps = prev
            static = static and bool(np.array_equal(pm, mask))
            if need_change:
                w, dg = boundary_weights(design, pm, ps, mask, sizes)
                bprev.append(w @ X[:, design.epoch_slice(r - 1)])
                bnext.append(w @ X[:, design.epoch_slice(r)])
                degen.append(dg)
        prev = (mask, sizes)
    return EpochEstimates(design, ht, bprev, bnext, degen, static)


def change_table(est: EpochEstimates, lag_steps: int):
    """Change estimates ``Delta(t_i - lag, t_i)`` for every grid index ``i`` from ``tau_1`` on.

    Lagged times before 0 are clamped to 0. Returns ``(delta, bad)`` shaped
    like ``est.ht``; entries before ``tau_1`` are zero.
    """
    d = est.design
    delta = np.zeros(est.ht.shape)
    bad = np.zeros(est.ht.shape, dtype=bool)
    if d.m == 0:
        return delta, bad
    for i in range(int(d.epoch_starts[1]), d.grid.size):
        delta[..., i], bad[..., i] = est.change(max(i - lag_steps, 0), i)
    return delta, bad


def composite_values(est: EpochEstimates, Q: float, lag_steps: int, table=None):
    """Composite recursion on the grid; returns ``(values, flags)`` shaped like ``est.ht``.

    ``table`` may pass a precomputed :func:`change_table` for ``lag_steps``.
    Where the change estimate is undefined the HT value is used and flagged.
    """
    if not 0.0 <= Q <= 1.0:
        raise ValidationError(f"composite weight Q={Q} must lie in [0, 1]")
    ht = est.ht
    d = est.design
    if Q == 1.0 or lag_steps == 0 or est.static or d.m == 0:
        return ht.copy(), np.zeros(ht.shape, dtype=bool)
    delta, bad = change_table(est, lag_steps) if table is None else table
    out = ht.copy()
    for i in range(int(d.epoch_starts[1]), d.grid.size):
        j = max(i - lag_steps, 0)
        val = Q * ht[..., i] + (1.0 - Q) * (out[..., j] + delta[..., i])
        out[..., i] = np.where(bad[..., i], ht[..., i], val)
    flags = bad.copy()
    flags[..., : int(d.epoch_starts[1])] = False
    return out, flags


def ise_values(values: np.ndarray, truth: np.ndarray, grid: TimeGrid) -> np.ndarray:
    err = values - truth
    return (err * err) @ grid.weights


# ---------------------------------------------------------------------------
# single-path API


def _path_epochs(path: SamplePath):
    for r in range(path.design.m + 1):
        yield r, path.masks[r], path.sizes[r]


def _check(pop: FunctionalPopulation, path: SamplePath):
    if path.masks.ndim != 2 or path.masks.shape[1] != pop.N:
        raise ValidationError("sample path does not match the population")
    if pop.grid != path.design.grid:
        raise ValidationError("sample path and population use different grids")


def ht_series(pop: FunctionalPopulation, path: SamplePath) -> EstimatorSeries:
    _check(pop, path)
    est = epoch_estimates(pop, path.design, _path_epochs(path), need_change=False)
    return EstimatorSeries(CurveSeries(pop.grid, est.ht), "ht")


def change_estimate(pop: FunctionalPopulation, path: SamplePath, t: float, u: float) -> float:
    """Estimated change of the population mean between times ``t <= u``."""
    _check(pop, path)
    if t > u:
        raise ValidationError("change_estimate requires t <= u")
    grid = pop.grid
    j, i = grid.snap(t), grid.snap(u)
    est = epoch_estimates(pop, path.design, _path_epochs(path))
    val, bad = est.change(j, i)
    if bool(bad):
        raise DegenerateOverlapError(f"no overlap between the samples at t={t} and u={u}")
    return float(val)


def composite_series(pop: FunctionalPopulation, path: SamplePath, Q: float, delta: float) -> EstimatorSeries:
    _check(pop, path)
    lag = pop.grid.lag_steps(delta)
    est = epoch_estimates(pop, path.design, _path_epochs(path))
    vals, flags = composite_values(est, Q, lag)
    return EstimatorSeries(CurveSeries(pop.grid, vals), "composite", {"Q": Q, "delta": delta}, flags)


def integral_estimate(est: EstimatorSeries) -> float:
    return float(est.grid.weights @ est.values)


def ise(est: EstimatorSeries | CurveSeries, truth: CurveSeries) -> float:
    series = est.series if isinstance(est, EstimatorSeries) else est
    if series.grid != truth.grid:
        raise ValidationError("estimate and truth are on different grids")
    return float(ise_values(series.values, truth.values, truth.grid))
