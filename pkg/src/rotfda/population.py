"""Stratified finite populations of curves on a shared uniform time grid.

Strata are addressed by 0-based index ``h`` in ``range(pop.H)``; the
original labels are kept in ``pop.stratum_names``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .errors import DataError, DataFormatError, UndefinedMomentError, ValidationError

_SPACING_RTOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform grid ``0 = t_0 < t_1 < ... < t_{G-1} = T`` (hours)."""

    t_points: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_points, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValidationError("time grid needs at least two points")
        if not np.all(np.isfinite(t)):
            raise ValidationError("time grid contains non-finite values")
        if t[0] != 0.0:
            raise ValidationError(f"time grid must start at 0, got {t[0]!r}")
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise ValidationError("time grid must be strictly increasing")
        h = (t[-1] - t[0]) / (t.size - 1)
        if np.max(np.abs(steps - h)) > _SPACING_RTOL * h:
            raise ValidationError("time grid must be uniformly spaced")
        object.__setattr__(self, "t_points", _frozen(t))

    @classmethod
    def uniform(cls, T: float, n_points: int) -> "TimeGrid":
        return cls(np.linspace(0.0, float(T), int(n_points)))

    @classmethod
    def from_spacing(cls, T: float, spacing: float) -> "TimeGrid":
        n = T / spacing
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValidationError(f"horizon {T} is not a multiple of spacing {spacing}")
        return cls.uniform(T, int(round(n)) + 1)

    @property
    def T(self) -> float:
        return float(self.t_points[-1])

    @property
    def spacing(self) -> float:
        return self.T / (self.size - 1)

    @property
    def size(self) -> int:
        return int(self.t_points.size)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.t_points, other.t_points)

    def __hash__(self):
        return hash((self.size, self.T))

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights; ``weights @ f`` integrates ``f`` over [0, T]."""
        w = np.full(self.size, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def snap(self, t: float) -> int:
        """Index of the grid point nearest ``t``; more than half a step away is an error."""
        if not (-0.5 * self.spacing <= t <= self.T + 0.5 * self.spacing):
            raise ValidationError(f"time {t} lies outside [0, {self.T}]")
        i = int(np.clip(np.rint(t / self.spacing), 0, self.size - 1))
        if abs(self.t_points[i] - t) > 0.5 * self.spacing * (1 + 1e-9):
            raise ValidationError(f"time {t} is more than half a grid step from the grid")
        return i

    def lag_steps(self, lag: float) -> int:
        """Number of grid steps in ``lag``; lags that are not a step multiple are rejected."""
        j = lag / self.spacing
        if lag < 0 or abs(j - round(j)) > 1e-6:
            raise ValidationError(f"lag {lag} is not a nonnegative multiple of the grid step {self.spacing}")
        return int(round(j))


@dataclass(frozen=True, eq=False)
class CurveSeries:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ValidationError(f"series has {v.shape} values for a grid of {self.grid.size}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("series contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True, eq=False)
class FunctionalPopulation:
    """Curves ``values[k, i] = X_k(t_i)`` with one stratum label per unit.

    Stratum indices follow the order in which labels first appear.
    """

    grid: TimeGrid
    values: np.ndarray
    labels: Sequence[Hashable]
    strata: np.ndarray = field(init=False)
    stratum_names: tuple = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.values, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.grid.size:
            raise ValidationError(f"values must be N x {self.grid.size}, got {X.shape}")
        if X.shape[0] == 0:
            raise ValidationError("population is empty")
        if not np.all(np.isfinite(X)):
            raise DataError("population contains non-finite curve values")
        labels = list(self.labels)
        if len(labels) != X.shape[0]:
            raise ValidationError("one stratum label per unit is required")
        names: dict = {}
        codes = np.empty(len(labels), dtype=np.int64)
        for k, lab in enumerate(labels):
            codes[k] = names.setdefault(lab, len(names))
        object.__setattr__(self, "values", _frozen(X))
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "strata", _frozen(codes))
        object.__setattr__(self, "stratum_names", tuple(names))

    @property
    def N(self) -> int:
        return int(self.values.shape[0])

    @property
    def H(self) -> int:
        return len(self.stratum_names)

    @property
    def strata_sizes(self) -> np.ndarray:
        return np.bincount(self.strata, minlength=self.H)

    def members(self, h: int) -> np.ndarray:
        """Unit indices of stratum ``h`` in increasing order."""
        self._check_h(h)
        return np.flatnonzero(self.strata == h)

    def stratum_values(self, h: int) -> np.ndarray:
        return self.values[self.members(h)]

    def _check_h(self, h: int):
        if not 0 <= h < self.H:
            raise ValidationError(f"stratum index {h} out of range 0..{self.H - 1}")


# ---------------------------------------------------------------------------
# moments


def population_mean(pop: FunctionalPopulation) -> CurveSeries:
    return CurveSeries(pop.grid, pop.values.mean(axis=0))


def stratum_mean(pop: FunctionalPopulation, h: int) -> CurveSeries:
    return CurveSeries(pop.grid, pop.stratum_values(h).mean(axis=0))


def stratum_covariance_matrix(pop: FunctionalPopulation, h: int) -> np.ndarray:
    """Full ``G x G`` matrix of the stratum covariance with divisor ``N_h - 1``."""
    Xh = pop.stratum_values(h)
    if Xh.shape[0] < 2:
        raise UndefinedMomentError(f"stratum {h} has a single unit; covariance is undefined")
    D = Xh - Xh.mean(axis=0)
    C = D.T @ D / (Xh.shape[0] - 1)
    return 0.5 * (C + C.T)


def stratum_variance(pop: FunctionalPopulation, h: int) -> np.ndarray:
    """Diagonal ``gamma_h(t, t)`` on the grid."""
    Xh = pop.stratum_values(h)
    if Xh.shape[0] < 2:
        raise UndefinedMomentError(f"stratum {h} has a single unit; variance is undefined")
    return Xh.var(axis=0, ddof=1)


def stratum_covariance(pop: FunctionalPopulation, h: int, t_idx: int, u_idx: int) -> float:
    Xh = pop.stratum_values(h)
    if Xh.shape[0] < 2:
        raise UndefinedMomentError(f"stratum {h} has a single unit; covariance is undefined")
    a = Xh[:, t_idx] - Xh[:, t_idx].mean()
    b = Xh[:, u_idx] - Xh[:, u_idx].mean()
    return float(a @ b / (Xh.shape[0] - 1))


def integrate_series(series: CurveSeries | np.ndarray, grid: TimeGrid | None = None) -> float:
    """Trapezoid integral over [0, T]."""
    if isinstance(series, CurveSeries):
        grid, values = series.grid, series.values
    else:
        values = np.asarray(series, dtype=float)
    return float(grid.weights @ values)


def avg_autocorrelation(pop: FunctionalPopulation, h: int, lag: float) -> float:
    """Integral over ``[0, T - lag]`` of the stratum correlation at lag ``lag``."""
    grid = pop.grid
    j = grid.lag_steps(lag)
    if j >= grid.size - 1:
        raise ValidationError(f"lag {lag} must be smaller than T={grid.T}")
    Xh = pop.stratum_values(h)
    if Xh.shape[0] < 2:
        raise UndefinedMomentError(f"stratum {h} has a single unit")
    D = Xh - Xh.mean(axis=0)
    var = (D * D).sum(axis=0)
    if np.any(var <= 0):
        raise UndefinedMomentError(f"stratum {h} has zero variance on the grid; correlation undefined")
    G = grid.size
    cross = (D[:, : G - j] * D[:, j:]).sum(axis=0)
    rho = cross / np.sqrt(var[: G - j] * var[j:])
    sub = TimeGrid(grid.t_points[: G - j])
    return float(sub.weights @ rho)


# ---------------------------------------------------------------------------
# synthetic populations


@dataclass(frozen=True)
class StratumSpec:
    """One stratum of a synthetic population.

    Curves are ``mean(t) + sd * Z_k(t)`` with ``Z_k`` a stationary Gaussian
    process of correlation ``exp(-decay * |t - t'|)``; the mean is
    ``level + amplitude * sin(2 pi t / period + phase)``.
    """

    size: int
    variance: float = 1.0
    decay: float = 0.0
    level: float = 0.0
    amplitude: float = 0.0
    period: float = 24.0
    phase: float = 0.0
    name: str | None = None

    def mean_curve(self, t: np.ndarray) -> np.ndarray:
        return self.level + self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)


def synth_population(
    strata: Sequence[StratumSpec], grid: TimeGrid, seed: int
) -> FunctionalPopulation:
    """Gaussian curves with an exponential temporal kernel, one block per stratum.

    Each stratum is centered to its target mean curve and rescaled so that the
    time-averaged within-stratum variance equals ``variance`` exactly.
    """
    if not strata:
        raise ValidationError("at least one stratum is required")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    t = grid.t_points
    blocks, labels = [], []
    for h, spec in enumerate(strata):
        if spec.size < 2:
            raise ValidationError(f"stratum {h} must have at least 2 units, got {spec.size}")
        if spec.decay < 0:
            raise ValidationError(f"stratum {h} decay must be >= 0")
        if spec.variance < 0:
            raise ValidationError(f"stratum {h} variance must be >= 0")
        rho = math.exp(-spec.decay * grid.spacing)
        Z = np.empty((spec.size, grid.size))
        Z[:, 0] = rng.standard_normal(spec.size)
        innov = math.sqrt(max(0.0, 1.0 - rho * rho))
        eps = rng.standard_normal((spec.size, grid.size - 1))
        for i in range(1, grid.size):
            Z[:, i] = rho * Z[:, i - 1] + innov * eps[:, i - 1]
        Z -= Z.mean(axis=0)
        realized = (Z * Z).sum(axis=0).mean() / (spec.size - 1)
        scale = math.sqrt(spec.variance / realized) if spec.variance > 0 and realized > 0 else 0.0
        blocks.append(spec.mean_curve(t)[None, :] + scale * Z)
        name = spec.name if spec.name is not None else f"s{h + 1}"
        labels.extend([name] * spec.size)
    return FunctionalPopulation(grid, np.vstack(blocks), labels)


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    stratum_column: str = "stratum"
    time_prefix: str = "t="


def load_population(path: str | Path, schema: CsvSchema | None = None) -> FunctionalPopulation:
    """Read ``stratum,t=<v1>,t=<v2>,...``; one unit per row."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"population file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if schema.stratum_column not in header:
        raise DataFormatError(f"{path}: missing '{schema.stratum_column}' column")
    s_col = header.index(schema.stratum_column)
    t_cols = [c for c in range(len(header)) if c != s_col]
    times = []
    for c in t_cols:
        name = header[c].strip()
        if not name.startswith(schema.time_prefix):
            raise DataFormatError(f"{path}: column '{name}' is not a time column")
        try:
            times.append(float(name[len(schema.time_prefix):]))
        except ValueError:
            raise DataFormatError(f"{path}: unparsable time in column '{name}'") from None
    try:
        grid = TimeGrid(np.array(times))
    except ValidationError as exc:
        raise DataFormatError(f"{path}: bad time header: {exc}") from None
    labels, values = [], np.empty((len(body), len(t_cols)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{r}: expected {len(header)} fields, got {len(row)}")
        labels.append(row[s_col])
        try:
            values[r - 2] = [float(row[c]) for c in t_cols]
        except ValueError:
            raise DataFormatError(f"{path}:{r}: unparsable curve value") from None
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0, 0]) + 2
        raise DataError(f"{path}:{bad}: non-finite curve value")
    if not labels:
        raise DataFormatError(f"{path}: no units")
    return FunctionalPopulation(grid, values, labels)


def save_population(pop: FunctionalPopulation, path: str | Path, schema: CsvSchema | None = None) -> None:
    """Write a CSV that :func:`load_population` reads back bit-identically."""
    schema = schema or CsvSchema()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.stratum_column] + [f"{schema.time_prefix}{t!r}" for t in pop.grid.t_points.tolist()])
        for lab, row in zip(pop.labels, pop.values.tolist()):
            w.writerow([lab] + [repr(v) for v in row])
