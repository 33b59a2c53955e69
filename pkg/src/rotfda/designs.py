"""Rotation designs: validation, sample-path generation and inclusion probabilities.

A design partitions ``[0, T]`` into epochs ``0..m`` separated by the
replacement times ``tau_1 < ... < tau_m``. Within an epoch the sample is
constant. Samples are stored as boolean membership masks over the ``N``
population units; every sampling primitive accepts arbitrary leading batch
dimensions so that Monte Carlo replications can be generated together.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CapacityError, ValidationError
from .population import FunctionalPopulation, TimeGrid

FIXED_PANEL = "fixed_panel"
FULL = "full_replacement"
PARTIAL = "partial_replacement"
CONVENTIONAL = "conventional_rotation"
KINDS = (FIXED_PANEL, FULL, PARTIAL, CONVENTIONAL)

ENUMERATION_LIMIT = 10**6


def round_half_up(x):
    """Nearest integer, halves rounded up (``round(1.5) == 2``, ``round(2.5) == 3``)."""
    return np.floor(np.asarray(x, dtype=float) + 0.5 + 1e-9).astype(np.int64)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed on ``(seed, *key)``.

    Streams for different keys are statistically independent and do not depend
    on the order in which they are created.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class RotationPattern:
    """Explicit conventional rotation pattern.

    ``slots[r]`` lists the slot indices (0..N-1) in the sample at epoch ``r``.
    Slot ``j`` belongs to the stratum of unit ``j``; the realized sample is the
    pattern composed with a random permutation of labels within each stratum.
    """

    slots: tuple

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(tuple(int(j) for j in s) for s in self.slots))

    @property
    def n_epochs(self) -> int:
        return len(self.slots)


@dataclass(frozen=True)
class DesignSpec:
    """Rotation design before validation against a population grid.

    ``alpha`` is one replacement rate per stratum (a scalar is broadcast).
    ``density`` optionally tabulates the replacement-time density ``g`` on the
    population grid; the default is uniform.
    """

    kind: str
    replacement_times: tuple = ()
    alpha: tuple | float = 0.0
    density: tuple | None = None
    pattern: RotationPattern | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown design kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "replacement_times", tuple(float(t) for t in self.replacement_times))
        if np.ndim(self.alpha) == 0:
            object.__setattr__(self, "alpha", float(self.alpha))
        else:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.density is not None:
            object.__setattr__(self, "density", tuple(float(g) for g in self.density))

    @property
    def m(self) -> int:
        return len(self.replacement_times)

    @classmethod
    def uniform(cls, kind: str, T: float, m: int, alpha=0.0, **kw) -> "DesignSpec":
        """Equally spaced replacement times ``tau_r = r T / (m + 1)``."""
        return cls(kind, tuple(r * T / (m + 1) for r in range(1, m + 1)), alpha, **kw)

    @classmethod
    def from_density(cls, kind: str, grid: TimeGrid, m: int, g, alpha=0.0, **kw) -> "DesignSpec":
        """Replacement times with ``int_0^{tau_r} g = r / (m + 1)`` for a tabulated density."""
        g = np.asarray(g, dtype=float)
        if g.shape != (grid.size,) or np.any(g <= 0):
            raise ValidationError("density must be positive on every grid point")
        G = _cumulative(g, grid)
        taus = np.interp(np.arange(1, m + 1) / (m + 1), G, grid.t_points)
        return cls(kind, tuple(taus), alpha, density=tuple(g), **kw)


def _cumulative(g: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Trapezoid cumulative integral of ``g``, normalized to end at 1."""
    G = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * grid.spacing)])
    return G / G[-1]


@dataclass(frozen=True, eq=False)
class AllocationTrace:
    """Sample sizes ``sizes[r, h] = n_h(tau_r)`` for epochs ``r = 0..m``."""

    sizes: np.ndarray

    def __post_init__(self):
        s = np.array(self.sizes, dtype=np.int64, ndmin=2)
        s.setflags(write=False)
        object.__setattr__(self, "sizes", s)

    @classmethod
    def constant(cls, sizes: Sequence[int], m: int) -> "AllocationTrace":
        return cls(np.tile(np.asarray(sizes, dtype=np.int64), (m + 1, 1)))


@dataclass(frozen=True, eq=False)
class ValidatedDesign:
    """Design normalized against a population: snapped times and integer counts.

    ``discards[r-1, h]``/``adds[r-1, h]`` are the numbers of units leaving and
    entering stratum ``h`` at ``tau_r``. Under full replacement the whole
    sample is redrawn, recorded as ``discards == n_{r-1}`` and ``adds == n_r``.
    """

    spec: DesignSpec
    grid: TimeGrid
    strata_sizes: np.ndarray
    members: tuple
    tau_idx: np.ndarray
    sizes: np.ndarray
    discards: np.ndarray
    adds: np.ndarray
    alpha: np.ndarray
    rounded: bool
    rounding_notes: tuple = ()
    epoch_of_grid: np.ndarray = field(init=False)

    def __post_init__(self):
        starts = np.concatenate([[0], self.tau_idx]).astype(np.int64)
        e = np.zeros(self.grid.size, dtype=np.int64)
        for r, i in enumerate(starts[1:], start=1):
            e[i:] = r
        for a in (starts, e):
            a.setflags(write=False)
        object.__setattr__(self, "epoch_of_grid", e)
        object.__setattr__(self, "_starts", starts)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def m(self) -> int:
        return int(self.tau_idx.size)

    @property
    def H(self) -> int:
        return int(self.strata_sizes.size)

    @property
    def N(self) -> int:
        return int(self.strata_sizes.sum())

    @property
    def epoch_starts(self) -> np.ndarray:
        """Grid index of ``tau_r`` for ``r = 0..m`` (``tau_0 = 0``)."""
        return self._starts

    def epoch_slice(self, r: int) -> slice:
        stop = self._starts[r + 1] if r < self.m else self.grid.size
        return slice(int(self._starts[r]), int(stop))

    @property
    def f(self) -> np.ndarray:
        """Sampling rates ``f[r, h] = n_h(tau_r) / N_h``."""
        return self.sizes / self.strata_sizes[None, :]

    @property
    def alpha_eff(self) -> np.ndarray:
        """Realized replacement rates ``discards / n_{r-1}`` per epoch and stratum."""
        return self.discards / self.sizes[:-1]

    @property
    def tau(self) -> np.ndarray:
        return self.grid.t_points[self.tau_idx]

    @property
    def density(self) -> np.ndarray:
        """Replacement-time density ``g`` on the grid, integrating to 1."""
        if self.spec.density is None:
            return np.full(self.grid.size, 1.0 / self.grid.T)
        g = np.asarray(self.spec.density, dtype=float)
        return g / (self.grid.weights @ g)

    @property
    def G_cumulative(self) -> np.ndarray:
        return _cumulative(self.density, self.grid)

    @property
    def is_static(self) -> bool:
        """True when the sample never changes (fixed panel behaviour)."""
        if self.kind == FULL:
            return self.m == 0
        return bool(np.all(self.discards == 0) and np.all(self.sizes == self.sizes[0]))

    def epoch_of(self, t: float) -> int:
        return epoch_of(self, t)


def validate_design(spec: DesignSpec, alloc: AllocationTrace, pop: FunctionalPopulation) -> ValidatedDesign:
    grid = pop.grid
    Nh = pop.strata_sizes
    H = pop.H
    tau_idx = []
    for r, t in enumerate(spec.replacement_times, start=1):
        if not 0.0 < t < grid.T:
            raise ValidationError(f"design.replacement_times[{r - 1}]={t} lies outside (0, {grid.T})")
        i = grid.snap(t)
        if i == 0 or i == grid.size - 1:
            raise ValidationError(f"design.replacement_times[{r - 1}]={t} snaps onto the boundary of [0, T]")
        if tau_idx and i <= tau_idx[-1]:
            raise ValidationError(f"design.replacement_times[{r - 1}]={t} does not snap to a later grid point than its predecessor")
        tau_idx.append(i)
    m = len(tau_idx)
    sizes = np.asarray(alloc.sizes, dtype=np.int64)
    if sizes.shape != (m + 1, H):
        raise ValidationError(f"allocation must have shape ({m + 1}, {H}), got {sizes.shape}")
    if np.any(sizes < 1):
        raise ValidationError("allocation.sizes: every n_h must be at least 1")
    if np.any(sizes > Nh[None, :]):
        raise ValidationError("allocation.sizes: n_h exceeds the stratum size N_h")

    if np.ndim(spec.alpha) != 0 and len(spec.alpha) != H:
        raise ValidationError(f"design.alpha must have one rate per stratum ({H})")
    alpha = np.broadcast_to(np.asarray(spec.alpha, dtype=float), (H,)).copy()
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValidationError("design.alpha: replacement rates must lie in [0, 1]")

    notes = []
    prev, nxt = sizes[:-1], sizes[1:]
    if spec.kind == FIXED_PANEL:
        if np.any(alpha != 0):
            raise ValidationError("design.alpha must be 0 for a fixed panel")
        if np.any(sizes != sizes[0]):
            raise ValidationError("allocation.sizes must be constant over time for a fixed panel")
    if spec.kind == FULL:
        discards, adds = prev.copy(), nxt.copy()
    elif spec.kind == CONVENTIONAL and spec.pattern is not None:
        discards, adds = _pattern_counts(spec.pattern, pop, sizes)
    else:
        raw = alpha[None, :] * prev
        discards = round_half_up(raw)
        for r, h in zip(*np.nonzero(np.abs(raw - discards) > 1e-9)):
            notes.append(f"epoch {r + 1} stratum {h}: alpha*n = {raw[r, h]:g} rounded to {discards[r, h]}")
        adds = nxt - prev + discards
        bad = (adds < 0) | (adds > Nh[None, :] - prev)
        if np.any(bad):
            r, h = (int(v) for v in np.argwhere(bad)[0])
            raise ValidationError(
                f"infeasible transition at tau_{r + 1}, stratum {h}: n {prev[r, h]} -> {nxt[r, h]} "
                f"with {discards[r, h]} discarded needs {adds[r, h]} additions from {Nh[h] - prev[r, h]} unsampled units"
            )
    members = tuple(pop.members(h) for h in range(H))
    return ValidatedDesign(
        spec=spec,
        grid=grid,
        strata_sizes=np.asarray(Nh, dtype=np.int64),
        members=members,
        tau_idx=np.asarray(tau_idx, dtype=np.int64),
        sizes=sizes,
        discards=np.asarray(discards, dtype=np.int64).reshape(m, H),
        adds=np.asarray(adds, dtype=np.int64).reshape(m, H),
        alpha=alpha,
        rounded=bool(notes),
        rounding_notes=tuple(notes),
    )


def _pattern_counts(pattern: RotationPattern, pop: FunctionalPopulation, sizes: np.ndarray):
    m1, H = sizes.shape
    if pattern.n_epochs != m1:
        raise ValidationError(f"design.pattern defines {pattern.n_epochs} epochs, expected {m1}")
    masks = pattern_masks(pattern, pop)
    counts = np.stack([np.bincount(pop.strata[mk], minlength=H) for mk in masks])
    if np.any(counts != sizes):
        raise ValidationError("design.pattern sizes do not match allocation.sizes")
    kept = np.stack([np.bincount(pop.strata[masks[r - 1] & masks[r]], minlength=H) for r in range(1, m1)]).reshape(m1 - 1, H)
    return sizes[:-1] - kept, sizes[1:] - kept


def pattern_masks(pattern: RotationPattern, pop: FunctionalPopulation) -> np.ndarray:
    masks = np.zeros((pattern.n_epochs, pop.N), dtype=bool)
    for r, slots in enumerate(pattern.slots):
        s = np.asarray(slots, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() >= pop.N):
            raise ValidationError(f"design.pattern epoch {r} references a slot outside 0..{pop.N - 1}")
        if np.unique(s).size != s.size:
            raise ValidationError(f"design.pattern epoch {r} repeats a slot")
        masks[r, s] = True
    return masks


def epoch_of(design: ValidatedDesign, t: float) -> int:
    """Number of replacement times ``tau_r <= t``; ``epoch_of(T) == m``."""
    if not 0.0 <= t <= design.grid.T:
        raise ValidationError(f"time {t} outside [0, {design.grid.T}]")
    return int(np.searchsorted(design.tau, t, side="right"))


# ---------------------------------------------------------------------------
# sampling primitives (batched over leading dimensions)


def srswor_mask(rng: np.random.Generator, candidates: np.ndarray, k) -> np.ndarray:
    """Select ``k`` of the ``True`` entries of ``candidates`` uniformly without replacement.

    ``candidates`` has shape ``(..., M)``; ``k`` is a scalar or has shape ``(...)``.
    """
    candidates = np.asarray(candidates, dtype=bool)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), candidates.shape[:-1])
    avail = candidates.sum(axis=-1)
    if np.any(k > avail) or np.any(k < 0):
        raise ValidationError("cannot select more units than are available")
    keys = rng.random(candidates.shape)
    keys[~candidates] = 2.0
    if candidates.shape[-1] == 0:
        return candidates.copy()
    srt = np.sort(keys, axis=-1)
    thr = np.take_along_axis(srt, np.maximum(k - 1, 0)[..., None], axis=-1)
    return (keys <= thr) & (k[..., None] > 0) & candidates


def initial_sample(design: ValidatedDesign, seed: int, key: tuple = (), batch: tuple = ()) -> np.ndarray:
    """Independent SRSWOR of ``n_h(tau_0)`` units in every stratum."""
    mask = np.zeros(batch + (design.N,), dtype=bool)
    for h, idx in enumerate(design.members):
        rng = stream(seed, *key, 1, h)
        cand = np.ones(batch + (idx.size,), dtype=bool)
        mask[..., idx] = srswor_mask(rng, cand, design.sizes[0, h])
    return mask


def step_full(state: np.ndarray, next_size, rng: np.random.Generator) -> np.ndarray:
    """Fresh SRSWOR of ``next_size`` units, independent of ``state``."""
    return srswor_mask(rng, np.ones_like(state, dtype=bool), next_size)


def step_partial(state: np.ndarray, next_size, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Discard ``round(alpha * n)`` sampled units, then add units from outside the old sample."""
    state = np.asarray(state, dtype=bool)
    n = state.sum(axis=-1)
    d = round_half_up(alpha * n)
    return _step_counts(state, next_size, d, rng)


def _step_counts(state, next_size, d, rng):
    n = state.sum(axis=-1)
    a = np.asarray(next_size) - n + d
    M = state.shape[-1]
    if np.any(a < 0) or np.any(a > M - n):
        raise ValidationError("infeasible partial replacement: additions outside [0, N_h - n_h]")
    drop = srswor_mask(rng, state, d)
    add = srswor_mask(rng, ~state, a)
    return (state & ~drop) | add


def iter_epochs(
    design: ValidatedDesign,
    seed: int,
    key: tuple = (),
    batch: tuple = (),
    size_rule: Callable | None = None,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(r, mask, sizes)`` for epochs ``r = 0..m``.

    ``mask`` has shape ``batch + (N,)`` and ``sizes`` shape ``batch + (H,)``.
    Epoch ``r`` of stratum ``h`` draws from ``stream(seed, *key, r + 1, h)``;
    conventional rotation draws its label permutation from ``stream(seed, *key, 0, h)``.
    ``size_rule(r, prev_mask, prev_sizes)`` may override the allocation for
    ``r >= 1`` (adaptive allocation); it must return sizes feasible for the design.
    """
    H = design.H
    sizes = np.broadcast_to(design.sizes[0], batch + (H,)).copy()
    if design.kind == CONVENTIONAL:
        yield from _iter_conventional(design, seed, key, batch, size_rule)
        return
    mask = initial_sample(design, seed, key, batch)
    yield 0, mask, sizes
    for r in range(1, design.m + 1):
        new_sizes = size_rule(r, mask, sizes) if size_rule is not None else np.broadcast_to(design.sizes[r], batch + (H,)).copy()
        new = np.empty_like(mask)
        for h, idx in enumerate(design.members):
            rng = stream(seed, *key, r + 1, h)
            sub = mask[..., idx]
            if design.kind == FULL:
                new[..., idx] = step_full(sub, new_sizes[..., h], rng)
            elif size_rule is None:
                new[..., idx] = _step_counts(sub, new_sizes[..., h], design.discards[r - 1, h], rng)
            else:
                new[..., idx] = step_partial(sub, new_sizes[..., h], design.alpha[h], rng)
        mask, sizes = new, new_sizes
        yield r, mask, sizes


def _iter_conventional(design, seed, key, batch, size_rule):
    H = design.H
    ranks = []
    for h, idx in enumerate(design.members):
        rng = stream(seed, *key, 0, h)
        keys = rng.random(batch + (idx.size,))
        ranks.append(np.argsort(np.argsort(keys, axis=-1), axis=-1))
    if design.spec.pattern is not None:
        if size_rule is not None:
            raise ValidationError("an explicit rotation pattern fixes the sample sizes; adaptive allocation is not possible")
        pm = pattern_masks(design.spec.pattern, _PopView(design))
        for r in range(design.m + 1):
            mask = np.zeros(batch + (design.N,), dtype=bool)
            for h, idx in enumerate(design.members):
                # slot idx[j] is realized as unit idx[perm[j]]; perm = inverse of ranks
                slot_in = pm[r, idx]
                mask[..., idx] = slot_in[ranks[h]]
            yield r, mask, np.broadcast_to(design.sizes[r], batch + (H,)).copy()
        return
    starts = np.zeros(batch + (H,), dtype=np.int64)
    sizes = np.broadcast_to(design.sizes[0], batch + (H,)).copy()
    mask = _window_mask(design, ranks, starts, sizes)
    yield 0, mask, sizes
    for r in range(1, design.m + 1):
        if size_rule is not None:
            new_sizes = size_rule(r, mask, sizes)
            d = round_half_up(design.alpha * sizes)
        else:
            new_sizes = np.broadcast_to(design.sizes[r], batch + (H,)).copy()
            d = np.broadcast_to(design.discards[r - 1], batch + (H,))
        a = new_sizes - sizes + d
        if np.any(a < 0) or np.any(a > design.strata_sizes - sizes):
            raise ValidationError(f"infeasible conventional rotation at tau_{r}")
        starts = starts + d
        sizes = new_sizes
        mask = _window_mask(design, ranks, starts, sizes)
        yield r, mask, sizes


def _window_mask(design, ranks, starts, sizes):
    mask = np.zeros(starts.shape[:-1] + (design.N,), dtype=bool)
    for h, idx in enumerate(design.members):
        pos = (ranks[h] - starts[..., h, None]) % idx.size
        mask[..., idx] = pos < sizes[..., h, None]
    return mask


class _PopView:
    """Minimal population stand-in for :func:`pattern_masks`."""

    def __init__(self, design: ValidatedDesign):
        self.N = design.N


def window_pattern(design: ValidatedDesign) -> RotationPattern:
    """Cyclic first-in-first-out rotation pattern over each stratum's units.

    Slots are taken in the stratum's unit order; at ``tau_r`` the oldest
    ``discards`` slots leave and the next slots in cyclic order enter.
    """
    starts = np.zeros(design.H, dtype=np.int64)
    out = []
    for r in range(design.m + 1):
        if r > 0:
            starts = starts + design.discards[r - 1]
        slots = []
        for h, idx in enumerate(design.members):
            pos = (np.arange(idx.size) - starts[h]) % idx.size
            slots.extend(idx[pos < design.sizes[r, h]].tolist())
        out.append(sorted(slots))
    return RotationPattern(tuple(out))


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Realized time-varying sample: one membership mask per epoch."""

    design: ValidatedDesign
    masks: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        counts = np.stack([self.masks[..., idx].sum(axis=-1) for idx in self.design.members], axis=-1)
        if np.any(counts != self.sizes):
            raise ValidationError("sample path violates |s_h(tau_r)| = n_h(tau_r)")

    def mask_at(self, t_idx: int) -> np.ndarray:
        return self.masks[..., self.design.epoch_of_grid[t_idx], :]

    def sizes_at(self, t_idx: int) -> np.ndarray:
        return self.sizes[..., self.design.epoch_of_grid[t_idx], :]


def sample_path(design: ValidatedDesign, seed: int, key: tuple = (), size_rule: Callable | None = None) -> SamplePath:
    masks, sizes = [], []
    for _, mk, sz in iter_epochs(design, seed, key, (), size_rule):
        masks.append(mk)
        sizes.append(sz)
    return SamplePath(design, np.stack(masks), np.stack(sizes))


def conventional_path(pattern: RotationPattern, perm_seed: int, pop: FunctionalPopulation,
                      design: ValidatedDesign | None = None, permutations=None) -> SamplePath:
    """Pattern composed with one uniform permutation of labels within each stratum.

    ``permutations[h]`` may fix the within-stratum permutation explicitly
    (slot ``j`` of the stratum is realized as its unit ``permutations[h][j]``).
    """
    pm = pattern_masks(pattern, pop)
    sizes = np.stack([np.bincount(pop.strata[mk], minlength=pop.H) for mk in pm])
    if design is None:
        m = pattern.n_epochs - 1
        spec = DesignSpec(CONVENTIONAL, tuple(np.linspace(0, pop.grid.T, m + 2)[1:-1]), 0.0, pattern=pattern)
        design = validate_design(spec, AllocationTrace(sizes), pop)
    masks = np.zeros_like(pm)
    for h in range(pop.H):
        idx = pop.members(h)
        if permutations is None:
            perm = stream(perm_seed, 0, h).permutation(idx.size)
        else:
            perm = np.asarray(permutations[h], dtype=np.int64)
            if sorted(perm.tolist()) != list(range(idx.size)):
                raise ValidationError(f"permutations[{h}] is not a permutation of 0..{idx.size - 1}")
        masks[:, idx[perm]] = pm[:, idx]
    return SamplePath(design, masks, sizes)


# ---------------------------------------------------------------------------
# inclusion probabilities


def lambda_epochs(design: ValidatedDesign, h: int) -> np.ndarray:
    """Matrix ``L[a, b] = lambda_h`` between epochs ``a`` and ``b`` (symmetric)."""
    m = design.m
    f = design.f[:, h]
    if design.kind == FULL:
        return np.eye(m + 1)
    if design.kind == CONVENTIONAL:
        return _lambda_from_overlaps(design, h)
    fac = np.ones(m)
    for r in range(1, m + 1):
        if f[r - 1] < 1.0:
            fac[r - 1] = (1.0 - design.alpha_eff[r - 1, h] - f[r]) / (1.0 - f[r - 1])
    L = np.eye(m + 1)
    for a in range(m + 1):
        acc = 1.0
        for b in range(a + 1, m + 1):
            acc *= fac[b - 1]
            L[a, b] = L[b, a] = acc
    return L


def _lambda_from_overlaps(design, h):
    idx = design.members[h]
    if design.spec.pattern is not None:
        pm = pattern_masks(design.spec.pattern, _PopView(design))[:, idx]
    else:
        pm = pattern_masks(window_pattern(design), _PopView(design))[:, idx]
    ov = pm.astype(float) @ pm.T.astype(float)
    Nh = idx.size
    f = design.f[:, h]
    L = np.eye(design.m + 1)
    for a in range(design.m + 1):
        for b in range(design.m + 1):
            if a == b:
                continue
            lo, hi = min(a, b), max(a, b)
            if f[lo] >= 1.0:
                L[a, b] = 1.0
                continue
            keep = ov[lo, hi] / (f[lo] * Nh)
            L[a, b] = (keep - f[hi]) / (1.0 - f[lo])
    return L


def lambda_kernel(design: ValidatedDesign, h: int, t: float, u: float) -> float:
    return float(lambda_epochs(design, h)[epoch_of(design, t), epoch_of(design, u)])


def lambda_grid(design: ValidatedDesign, h: int) -> np.ndarray:
    """``lambda_h(t_i, t_j)`` for all grid pairs."""
    e = design.epoch_of_grid
    return lambda_epochs(design, h)[np.ix_(e, e)]


def retention_prob(design: ValidatedDesign, h: int, t: float, u: float) -> tuple[float, float]:
    """``(P(k in s(u) | k in s(t)), P(k in s(u) | k not in s(t)))`` for ``t <= u``."""
    if t > u:
        raise ValidationError("retention_prob requires t <= u")
    a, b = epoch_of(design, t), epoch_of(design, u)
    lam = lambda_epochs(design, h)[a, b]
    ft, fu = design.f[a, h], design.f[b, h]
    return (1.0 - ft) * lam + fu, fu - ft * lam


def pi_kk_epochs(design: ValidatedDesign, h: int) -> np.ndarray:
    """``P(k in s(tau_a), k in s(tau_b))`` for a unit of stratum ``h``."""
    f = design.f[:, h]
    L = lambda_epochs(design, h)
    e = np.arange(design.m + 1)
    early = np.where(e[:, None] <= e[None, :], f[:, None], f[None, :])
    late = np.where(e[:, None] <= e[None, :], f[None, :], f[:, None])
    return early * ((1.0 - early) * L + late)


# ---------------------------------------------------------------------------
# two-unit and four-unit chains


def _beta(design: ValidatedDesign, h: int, r: int) -> float:
    f = design.f[:, h]
    if f[r - 1] >= 1.0:
        return 0.0
    return (f[r] - (1.0 - design.alpha_eff[r - 1, h]) * f[r - 1]) / (1.0 - f[r - 1])


def two_unit_template(design: ValidatedDesign, h: int, r: int) -> np.ndarray:
    """Large-population transition matrix of ``I_k + I_l`` from ``tau_{r-1}`` to ``tau_r``."""
    a = design.alpha_eff[r - 1, h]
    b = _beta(design, h, r)
    return np.array(
        [
            [(1 - b) ** 2, 2 * (1 - b) * b, b**2],
            [a * (1 - b), a * b + (1 - a) * (1 - b), (1 - a) * b],
            [a**2, 2 * (1 - a) * a, (1 - a) ** 2],
        ]
    )


def two_unit_chain(design: ValidatedDesign, h: int, t: float, u: float) -> np.ndarray:
    """Product of the template matrices over the epochs between ``t <= u``."""
    if design.kind not in (PARTIAL, FIXED_PANEL):
        raise ValidationError("two_unit_chain applies to partial replacement designs")
    a, b = epoch_of(design, t), epoch_of(design, u)
    if a > b:
        raise ValidationError("two_unit_chain requires t <= u")
    Q = np.eye(3)
    for r in range(a + 1, b + 1):
        Q = Q @ two_unit_template(design, h, r)
    return Q


def _hyper(total: int, succ: int, draws: int, x: int) -> float:
    if x < 0 or x > succ or draws - x < 0 or draws - x > total - succ:
        return 0.0
    return math.comb(succ, x) * math.comb(total - succ, draws - x) / math.comb(total, draws)


def subset_chain_initial(design: ValidatedDesign, h: int, q: int) -> np.ndarray:
    """Law of ``s_h(tau_0) & D`` for a fixed set ``D`` of ``q`` units, states as bitmasks."""
    Nh, n = int(design.strata_sizes[h]), int(design.sizes[0, h])
    p = np.empty(1 << q)
    for A in range(1 << q):
        j = bin(A).count("1")
        p[A] = math.comb(Nh - q, n - j) / math.comb(Nh, n) if 0 <= n - j <= Nh - q else 0.0
    return p


def subset_chain_step(design: ValidatedDesign, h: int, r: int, q: int) -> np.ndarray:
    """Exact transition matrix of ``s_h(tau) & D`` from ``tau_{r-1}`` to ``tau_r``."""
    Nh = int(design.strata_sizes[h])
    n_prev, n_next = int(design.sizes[r - 1, h]), int(design.sizes[r, h])
    S = 1 << q
    P = np.zeros((S, S))
    pc = [bin(A).count("1") for A in range(S)]
    if design.kind == FULL:
        for B in range(S):
            j = pc[B]
            val = math.comb(Nh - q, n_next - j) / math.comb(Nh, n_next) if 0 <= n_next - j <= Nh - q else 0.0
            P[:, B] = val
        return P
    if design.kind == CONVENTIONAL:
        raise ValidationError("conventional rotation is not a Markov design")
    d, a = int(design.discards[r - 1, h]), int(design.adds[r - 1, h])
    for A in range(S):
        j = pc[A]
        inside = [i for i in range(q) if A >> i & 1]
        outside = [i for i in range(q) if not A >> i & 1]
        for x in range(len(inside) + 1):
            pd = math.comb(n_prev - j, d - x) / math.comb(n_prev, d) if 0 <= d - x <= n_prev - j else 0.0
            if pd == 0.0:
                continue
            for X in itertools.combinations(inside, x):
                for y in range(len(outside) + 1):
                    free = Nh - n_prev - (q - j)
                    pa = math.comb(free, a - y) / math.comb(Nh - n_prev, a) if 0 <= a - y <= free else 0.0
                    if pa == 0.0:
                        continue
                    for Y in itertools.combinations(outside, y):
                        B = A
                        for i in X:
                            B &= ~(1 << i)
                        for i in Y:
                            B |= 1 << i
                        P[A, B] += pd * pa
    return P


def two_unit_chain_exact(design: ValidatedDesign, h: int, t: float, u: float) -> np.ndarray:
    """Exact finite-population transition law of ``I_k + I_l`` between ``t <= u``."""
    a, b = epoch_of(design, t), epoch_of(design, u)
    Q = np.eye(4)
    for r in range(a + 1, b + 1):
        Q = Q @ subset_chain_step(design, h, r, 2)
    lump = np.zeros((4, 3))
    for B in range(4):
        lump[B, bin(B).count("1")] = 1.0
    # rows: representative states 0 -> {}, 1 -> {k}, 2 -> {k,l}
    return (Q @ lump)[[0, 1, 3]]


def subset_chain_joint(design: ValidatedDesign, h: int, q: int, a: int, b: int) -> np.ndarray:
    """Joint law ``J[A, B] = P(s(tau_a) & D = A, s(tau_b) & D = B)`` for epochs ``a <= b``."""
    p = subset_chain_initial(design, h, q)
    for r in range(1, a + 1):
        p = p @ subset_chain_step(design, h, r, q)
    J = np.diag(p)
    for r in range(a + 1, b + 1):
        J = J @ subset_chain_step(design, h, r, q)
    return J


# ---------------------------------------------------------------------------
# exhaustive enumeration


def _branching(design: ValidatedDesign, h: int) -> int:
    Nh = int(design.strata_sizes[h])
    n = design.sizes[:, h]
    if design.kind == CONVENTIONAL:
        return math.factorial(Nh)
    count = math.comb(Nh, int(n[0]))
    for r in range(1, design.m + 1):
        if design.kind == FULL:
            count *= math.comb(Nh, int(n[r]))
        else:
            d, a = int(design.discards[r - 1, h]), int(design.adds[r - 1, h])
            count *= math.comb(int(n[r - 1]), d) * math.comb(Nh - int(n[r - 1]), a)
    return count


def path_count(design: ValidatedDesign, h: int | None = None) -> int:
    if h is not None:
        return _branching(design, h)
    return math.prod(_branching(design, g) for g in range(design.H))


def enumerate_stratum_paths(design: ValidatedDesign, h: int, exact: bool = False, limit: int = ENUMERATION_LIMIT):
    """All sample paths of stratum ``h`` with their probabilities.

    Returns a list of ``(prob, path)`` where ``path`` is a tuple over epochs of
    sorted tuples of within-stratum positions ``0..N_h-1``. Probabilities are
    ``Fraction`` when ``exact`` is true.
    """
    count = _branching(design, h)
    if count > limit:
        raise CapacityError(f"stratum {h} has {count} sample paths (limit {limit}); use Monte Carlo")
    one = Fraction(1) if exact else 1.0
    Nh = int(design.strata_sizes[h])
    n = [int(v) for v in design.sizes[:, h]]
    units = range(Nh)
    if design.kind == CONVENTIONAL:
        pm = (pattern_masks(design.spec.pattern, _PopView(design)) if design.spec.pattern is not None
              else pattern_masks(window_pattern(design), _PopView(design)))[:, design.members[h]]
        out: dict = {}
        w = one / math.factorial(Nh)
        for perm in itertools.permutations(units):
            path = tuple(tuple(sorted(perm[j] for j in np.flatnonzero(pm[r]))) for r in range(design.m + 1))
            out[path] = out.get(path, 0) + w
        return list((p, path) for path, p in out.items())
    first = list(itertools.combinations(units, n[0]))
    paths = [(one / len(first), (s,)) for s in first]
    for r in range(1, design.m + 1):
        nxt = []
        if design.kind == FULL:
            choices = list(itertools.combinations(units, n[r]))
            w = one / len(choices)
            for p, path in paths:
                for s in choices:
                    nxt.append((p * w, path + (s,)))
        else:
            d, a = int(design.discards[r - 1, h]), int(design.adds[r - 1, h])
            for p, path in paths:
                cur = path[-1]
                rest = [k for k in units if k not in cur]
                drops = list(itertools.combinations(cur, d))
                news = list(itertools.combinations(rest, a))
                w = one / (len(drops) * len(news))
                for D in drops:
                    kept = [k for k in cur if k not in D]
                    for A in news:
                        nxt.append((p * w, path + (tuple(sorted(kept + list(A))),)))
        paths = nxt
    merged: dict = {}
    for p, path in paths:
        merged[path] = merged.get(path, 0) + p
    return list((p, path) for path, p in merged.items())


def enumerate_paths(design: ValidatedDesign, exact: bool = False, limit: int = ENUMERATION_LIMIT):
    """All joint sample paths as ``(prob, masks)`` with ``masks`` of shape ``(m+1, N)``."""
    total = path_count(design)
    if total > limit:
        raise CapacityError(f"design has {total} joint sample paths (limit {limit}); use Monte Carlo")
    per = [enumerate_stratum_paths(design, h, exact, limit) for h in range(design.H)]
    out = []
    for combo in itertools.product(*per):
        p = 1
        masks = np.zeros((design.m + 1, design.N), dtype=bool)
        for h, (ph, path) in enumerate(combo):
            p = p * ph
            idx = design.members[h]
            for r, s in enumerate(path):
                masks[r, idx[list(s)]] = True
        out.append((p, masks))
    return out
