"""Per-epoch sample sizes: proportional, Neyman-optimal and adaptive allocation.

All integer allocations are computed by one greedy engine that adds units in
order of priority inside per-stratum bounds ``lo <= n_h <= hi``. For Neyman
allocation the priority is the marginal decrease of
``sum_h N_h^2 S_h^2 / n_h``; since that objective is separable and convex the
greedy result is an exact integer minimizer. Ties go to the stratum furthest
below its proportional quota, then to the lower stratum index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

KINDS = ("proportional", "neyman", "adaptive")


@dataclass(frozen=True)
class AllocationPolicy:
    kind: str
    total: int
    floor: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"allocation.kind must be one of {KINDS}, got {self.kind!r}")
        if self.floor < 1:
            raise ValidationError("allocation.floor must be >= 1")
        if self.kind == "adaptive" and self.floor < 2:
            raise ValidationError("allocation.floor must be >= 2 for adaptive allocation")


class Allocation(NamedTuple):
    sizes: np.ndarray
    fallback: np.ndarray  # True where all variances vanished and proportional was used


def _bounds(Nh, n, floor, lo, hi, batch):
    Nh = np.asarray(Nh, dtype=np.int64)
    lo = np.broadcast_to(np.minimum(floor, Nh) if lo is None else lo, batch + Nh.shape).astype(np.int64)
    hi = np.broadcast_to(Nh if hi is None else hi, batch + Nh.shape).astype(np.int64)
    if np.any(lo > hi):
        raise ValidationError("allocation bounds are empty for some stratum")
    if np.any(lo.sum(axis=-1) > n):
        raise ValidationError(f"allocation.total={n} is below the sum of per-stratum minimums")
    if np.any(hi.sum(axis=-1) < n):
        raise ValidationError(f"allocation.total={n} exceeds the sum of per-stratum maximums")
    return Nh, lo.copy(), hi


def _greedy(a, quota, lo, hi, n):
    """Add units one at a time to ``lo`` until every row sums to ``n``.

    ``a`` has shape ``(R, H)``: the priority of adding a unit to a stratum of
    current size ``s`` is ``a / (s (s + 1))``.
    """
    s = lo.copy()
    remaining = n - s.sum(axis=-1)
    rows = np.arange(s.shape[0])
    while np.any(remaining > 0):
        act = remaining > 0
        gain = a / (s * (s + 1.0))
        gain = np.where(s >= hi, -np.inf, gain)
        best = gain.max(axis=-1, keepdims=True)
        tied = (gain == best) & np.isfinite(gain)
        deficit = np.where(tied, quota - s, -np.inf)
        choice = deficit.argmax(axis=-1)
        s[rows[act], choice[act]] += 1
        remaining = remaining - act
    return s


def proportional_alloc(strata_sizes, n: int, floor: int = 2, lo=None, hi=None) -> np.ndarray:
    """``n_h ~ (N_h / N) n`` by largest remainder, with ``n_h >= floor``."""
    Nh, lo_, hi_ = _bounds(strata_sizes, n, floor, lo, hi, ())
    quota = n * Nh / Nh.sum()
    s = _greedy(np.zeros((1, Nh.size)), quota[None, :], lo_[None, :], hi_[None, :], n)
    return s[0]


def neyman_alloc_batch(strata_sizes, n: int, variances, floor: int = 2, lo=None, hi=None) -> Allocation:
    """Neyman allocation for a batch of variance vectors ``variances[..., h]``."""
    variances = np.asarray(variances, dtype=float)
    if np.any(variances < 0) or not np.all(np.isfinite(variances)):
        raise ValidationError("stratum variances must be finite and nonnegative")
    batch = variances.shape[:-1]
    Nh, lo_, hi_ = _bounds(strata_sizes, n, floor, lo, hi, batch)
    H = Nh.size
    a = (Nh.astype(float) ** 2) * variances
    fallback = ~np.any(a > 0, axis=-1)
    a = a.reshape(-1, H)
    quota = np.broadcast_to(n * Nh / Nh.sum(), a.shape)
    s = _greedy(a, quota, lo_.reshape(-1, H), hi_.reshape(-1, H), n)
    return Allocation(s.reshape(batch + (H,)), fallback)


def neyman_alloc(strata_sizes, n: int, variances, floor: int = 2, lo=None, hi=None) -> Allocation:
    """Integer Neyman allocation ``n_h ~ N_h sqrt(variance_h)`` with ``sum n_h = n``."""
    out = neyman_alloc_batch(strata_sizes, n, np.asarray(variances, dtype=float)[None, :], floor, lo, hi)
    return Allocation(out.sizes[0], out.fallback[0])


def sample_variances(X_t: np.ndarray, mask: np.ndarray, members) -> np.ndarray:
    """Per-stratum sample variance (divisor ``n_h - 1``) of ``X_t`` over the sampled units.

    ``mask`` has shape ``(..., N)``; the result has shape ``(..., H)``.
    """
    out = []
    for idx in members:
        mk = mask[..., idx].astype(float)
        x = X_t[idx]
        n = mk.sum(axis=-1)
        if np.any(n < 2):
            raise ValidationError("adaptive allocation needs at least 2 sampled units per stratum")
        mean = (mk @ x) / n
        ss = mk @ (x * x) - n * mean * mean
        out.append(np.maximum(ss, 0.0) / (n - 1))
    return np.stack(out, axis=-1)


def adaptive_alloc(pop, n: int, mask: np.ndarray, t_last: int, floor: int = 2, lo=None, hi=None) -> Allocation:
    """Neyman allocation with variances estimated from the sample at grid index ``t_last``."""
    members = [pop.members(h) for h in range(pop.H)]
    v = sample_variances(pop.values[:, t_last], np.asarray(mask, dtype=bool), members)
    return neyman_alloc_batch(pop.strata_sizes, n, v, floor, lo, hi)


def neyman_objective(strata_sizes, sizes, variances) -> float:
    """``sum_h N_h^2 (1/n_h - 1/N_h) S_h^2``, the stratified variance of the total."""
    Nh = np.asarray(strata_sizes, dtype=float)
    s = np.asarray(sizes, dtype=float)
    return float(np.sum(Nh**2 * (1 / s - 1 / Nh) * np.asarray(variances, dtype=float)))
