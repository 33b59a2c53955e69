"""Design covariance of the HT estimator, MISE and the variance of the ISE.

Kernels are evaluated on the population grid and integrated with the same
trapezoid weights used for the empirical ISE, so analytic and Monte Carlo
quantities are directly comparable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .designs import (
    CONVENTIONAL,
    ENUMERATION_LIMIT,
    FIXED_PANEL,
    FULL,
    PARTIAL,
    ValidatedDesign,
    enumerate_stratum_paths,
    epoch_of,
    lambda_grid,
    path_count,
    subset_chain_joint,
)
from .errors import CapacityError, DataFormatError, ValidationError
from .population import FunctionalPopulation, TimeGrid, stratum_covariance_matrix


@dataclass(frozen=True, eq=False)
class CovKernel:
    """Covariance ``Cov(mu_ht(t_i), mu_ht(t_j))`` on every grid pair."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.size, self.grid.size):
            raise ValidationError("kernel shape does not match the grid")
        scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
        if not np.allclose(v, v.T, rtol=0.0, atol=1e-12 * scale):
            raise ValidationError("covariance kernel is not symmetric")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def to_csv(self, path: str | Path) -> None:
        t = self.grid.t_points.tolist()
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [repr(x) for x in t])
            for ti, row in zip(t, self.values.tolist()):
                w.writerow([repr(ti)] + [repr(x) for x in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "CovKernel":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        try:
            t = np.array([float(x) for x in rows[0][1:]])
            vals = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"{path}: not a kernel CSV ({exc})") from None
        return cls(TimeGrid(t), vals)


def _grid_f(design: ValidatedDesign) -> np.ndarray:
    """Sampling rate at every grid point, shape ``(G, H)``."""
    return design.f[design.epoch_of_grid]


def _kernel(pop: FunctionalPopulation, design: ValidatedDesign, lam_fn) -> np.ndarray:
    if pop.grid != design.grid or pop.N != design.N:
        raise ValidationError("design was validated against a different population")
    G = pop.grid.size
    i = np.arange(G)
    earlier = i[:, None] <= i[None, :]
    F = _grid_f(design)
    K = np.zeros((G, G))
    N = pop.N
    for h in range(pop.H):
        Nh = pop.strata_sizes[h]
        if Nh < 2:
            continue
        f = F[:, h]
        f_early = np.where(earlier, f[:, None], f[None, :])
        f_late = np.where(earlier, f[None, :], f[:, None])
        K += (Nh / N) * (1.0 - f_early) / f_late * lam_fn(h) * stratum_covariance_matrix(pop, h)
    K /= N
    return 0.5 * (K + K.T)


def cov_full(pop: FunctionalPopulation, design: ValidatedDesign) -> CovKernel:
    """Full replacement: independent SRSWOR per epoch, zero covariance across epochs."""
    if design.kind != FULL:
        raise ValidationError("cov_full requires a full replacement design")
    e = design.epoch_of_grid
    same = (e[:, None] == e[None, :]).astype(float)
    return CovKernel(pop.grid, _kernel(pop, design, lambda h: same))


def cov_partial(pop: FunctionalPopulation, design: ValidatedDesign) -> CovKernel:
    """Partial replacement (including fixed panels and conventional rotation)."""
    if design.kind == FULL:
        raise ValidationError("cov_partial does not apply to full replacement; use cov_full")
    return CovKernel(pop.grid, _kernel(pop, design, lambda h: lambda_grid(design, h)))


def cov_kernel(pop: FunctionalPopulation, design: ValidatedDesign) -> CovKernel:
    return cov_full(pop, design) if design.kind == FULL else cov_partial(pop, design)


def mise(cov: CovKernel) -> float:
    """Integrated pointwise variance; equals the MISE of an unbiased estimator."""
    return float(cov.grid.weights @ np.diag(cov.values))


def gaussian_var_ise(cov: CovKernel) -> float:
    """``2 * iint Cov(t, t')^2``, the ISE variance of a Gaussian unbiased estimator."""
    w = cov.grid.weights
    return float(2.0 * w @ (cov.values * cov.values) @ w)


# ---------------------------------------------------------------------------
# asymptotic Var(ISE)


def var_ise_full_asym(pop: FunctionalPopulation, design: ValidatedDesign) -> float:
    """Large-population Var(ISE) under full replacement with replacement density ``g``.

    ``(2 / (m N^2)) int K(t)^2 / g(t) dt`` with
    ``K(t) = sum_h (N_h/N) (1 - f_h(t)) / f_h(t) gamma_h(t, t)``.
    """
    if design.kind != FULL:
        raise ValidationError("var_ise_full_asym requires a full replacement design")
    if design.m < 1:
        raise ValidationError("var_ise_full_asym needs at least one replacement time")
    F = _grid_f(design)
    K = np.zeros(pop.grid.size)
    for h in range(pop.H):
        if pop.strata_sizes[h] < 2:
            continue
        gam = np.diag(stratum_covariance_matrix(pop, h))
        K += pop.strata_sizes[h] / pop.N * (1.0 - F[:, h]) / F[:, h] * gam
    g = design.density
    return float(2.0 / (design.m * pop.N**2) * (pop.grid.weights @ (K * K / g)))


def var_ise_partial_asym(pop: FunctionalPopulation, design: ValidatedDesign) -> float:
    """Large-population Var(ISE) under partial replacement, ``2 iint Cov^2`` with the exact kernel."""
    if design.kind not in (PARTIAL, FIXED_PANEL, CONVENTIONAL):
        raise ValidationError("var_ise_partial_asym requires a partial replacement design or fixed panel")
    return gaussian_var_ise(cov_partial(pop, design))


def corollary_decay(design: ValidatedDesign) -> np.ndarray:
    """Decay constants ``c_h = alpha_h m / (1 - f_h)`` implied by a constant-size design."""
    if np.any(design.sizes != design.sizes[0]):
        raise ValidationError("decay constants need constant sample sizes")
    f = design.f[0]
    a = design.alpha_eff.mean(axis=0) if design.m else np.zeros(design.H)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(f < 1.0, a * design.m / (1.0 - f), 0.0)


def var_ise_corollary(pop: FunctionalPopulation, sizes, c, G=None) -> float:
    """Var(ISE) with the sampling kernel replaced by ``exp(-c_h |G(t) - G(t')|)``.

    Parameters
    ----------
    sizes : per-stratum constant sample sizes.
    c : per-stratum decay constants (scalar broadcast).
    G : cumulative replacement-time distribution on the grid; uniform by default.
    """
    grid = pop.grid
    n = np.asarray(sizes, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), (pop.H,))
    if np.any(c < 0):
        raise ValidationError("decay constants must be nonnegative")
    if n.shape != (pop.H,) or np.any(n < 1) or np.any(n > pop.strata_sizes):
        raise ValidationError("sizes must give 1 <= n_h <= N_h for every stratum")
    Gc = grid.t_points / grid.T if G is None else np.asarray(G, dtype=float)
    if Gc.shape != (grid.size,):
        raise ValidationError("G must be tabulated on the population grid")
    dist = np.abs(Gc[:, None] - Gc[None, :])
    K = np.zeros((grid.size, grid.size))
    for h in range(pop.H):
        Nh = pop.strata_sizes[h]
        if Nh < 2:
            continue
        f = n[h] / Nh
        K += Nh / pop.N * (1.0 - f) / f * np.exp(-c[h] * dist) * stratum_covariance_matrix(pop, h)
    w = grid.weights
    return float(2.0 / pop.N**2 * (w @ (K * K) @ w))


# ---------------------------------------------------------------------------
# exact small-instance oracles


def _stratum_errors(pop, design, h, exact, limit):
    """Per-path probability and ``Y_h(t) = sum_{k in s_h(t)} X_k(t) / f_h(t) - N_h mu_h(t)``."""
    paths = enumerate_stratum_paths(design, h, exact=exact, limit=limit)
    X = pop.stratum_values(h)
    Nh = X.shape[0]
    e = design.epoch_of_grid
    n = design.sizes[:, h]
    if exact:
        Xq = [[Fraction(float(v)) for v in row] for row in X]
        total = [sum(Xq[k][i] for k in range(Nh)) for i in range(pop.grid.size)]
        probs, Ys = [], []
        for p, path in paths:
            y = []
            for i in range(pop.grid.size):
                r = e[i]
                y.append(sum(Xq[k][i] for k in path[r]) * Fraction(Nh, int(n[r])) - total[i])
            probs.append(p)
            Ys.append(y)
        return probs, np.array(Ys, dtype=object)
    probs = np.array([p for p, _ in paths])
    masks = np.zeros((len(paths), design.m + 1, Nh))
    for j, (_, path) in enumerate(paths):
        for r, s in enumerate(path):
            masks[j, r, list(s)] = 1.0
    Y = np.empty((len(paths), pop.grid.size))
    for r in range(design.m + 1):
        sl = design.epoch_slice(r)
        Y[:, sl] = masks[:, r, :] @ X[:, sl] * (Nh / n[r]) - X[:, sl].sum(axis=0)
    return probs, Y


def var_ise_exact_small(pop: FunctionalPopulation, design: ValidatedDesign, exact: bool = False,
                        limit: int = ENUMERATION_LIMIT):
    """Exact design variance of the ISE of the HT estimator by path enumeration.

    Strata are enumerated separately: with ``Y_h`` the stratum error curves,
    ``N^4 Var(ISE) = sum_h Var(<w, Y_h^2>) + 2 w'(sum_{h != g} C_h o C_g) w``
    where ``C_h`` is the covariance kernel of ``Y_h`` and ``w`` the quadrature
    weights. With ``exact=True`` the computation is carried out in rational
    arithmetic (curve values are converted exactly) and a ``Fraction`` returned.

    Raises
    ------
    CapacityError
        If any stratum, or the joint instance, has more than ``limit`` paths.
    """
    if pop.grid != design.grid or pop.N != design.N:
        raise ValidationError("design was validated against a different population")
    total = path_count(design)
    if total > limit:
        raise CapacityError(f"design has {total} joint sample paths (limit {limit}); use Monte Carlo")
    if exact and pop.N > 4:
        raise ValidationError("rational mode is restricted to populations of at most 4 units")
    if exact:
        w = [Fraction(float(x)) for x in pop.grid.weights]
        Gn = pop.grid.size
        var_sq, Cs = Fraction(0), []
        for h in range(pop.H):
            probs, Y = _stratum_errors(pop, design, h, True, limit)
            Z = [sum(w[i] * y[i] * y[i] for i in range(Gn)) for y in Y]
            mz = sum(p * z for p, z in zip(probs, Z))
            var_sq += sum(p * (z - mz) ** 2 for p, z in zip(probs, Z))
            Cs.append([[sum(p * y[i] * y[j] for p, y in zip(probs, Y)) for j in range(Gn)] for i in range(Gn)])
        cross = Fraction(0)
        for a in range(len(Cs)):
            for b in range(len(Cs)):
                if a != b:
                    cross += sum(w[i] * w[j] * Cs[a][i][j] * Cs[b][i][j] for i in range(Gn) for j in range(Gn))
        return (var_sq + 2 * cross) / Fraction(pop.N) ** 4
    w = pop.grid.weights
    var_sq = 0.0
    Csum = np.zeros((pop.grid.size, pop.grid.size))
    Csq = np.zeros_like(Csum)
    for h in range(pop.H):
        probs, Y = _stratum_errors(pop, design, h, False, limit)
        Z = (Y * Y) @ w
        mz = probs @ Z
        var_sq += probs @ (Z - mz) ** 2
        C = (Y * probs[:, None]).T @ Y
        Csum += C
        Csq += C * C
    cross = w @ (Csum * Csum - Csq) @ w
    return float((var_sq + 2.0 * cross) / pop.N**4)


def _timed_epochs(design, t, u):
    a, b = epoch_of(design, t), epoch_of(design, u)
    return (a, b) if a <= b else (b, a)


def _check_markov(design, h):
    if design.kind == CONVENTIONAL:
        raise ValidationError("indicator moments by subset chains require a full or partial replacement design")
    if not 0 <= h < design.H:
        raise ValidationError(f"stratum index {h} out of range")


def indicator_joint(design: ValidatedDesign, h: int, q: int, t: float, u: float) -> np.ndarray:
    """``J[A, B] = P(s_h(t) & D = A, s_h(u) & D = B)`` for ``q`` fixed distinct units ``D``."""
    _check_markov(design, h)
    if q > int(design.strata_sizes[h]):
        raise ValidationError(f"stratum {h} has fewer than {q} units")
    a, b = _timed_epochs(design, t, u)
    J = subset_chain_joint(design, h, q, a, b)
    return J if epoch_of(design, t) <= epoch_of(design, u) else J.T


def delta_ijkl(design: ValidatedDesign, h: int, units, t: float, u: float) -> float:
    """Fourth-order centered indicator moment minus its second-order product.

    ``units = (i, j, k, l)`` are within-stratum labels (repeats allowed);
    returns ``E[(I_i(t)-pi)(I_j(t)-pi)(I_k(u)-pi)(I_l(u)-pi)] - Delta_ij(t,t) Delta_kl(u,u)``.
    """
    labels = sorted(set(units))
    pos = [labels.index(x) for x in units]
    q = len(labels)
    J = indicator_joint(design, h, q, t, u)
    S = 1 << q
    bit = np.array([[A >> p & 1 for p in range(q)] for A in range(S)], dtype=float)
    a, b = epoch_of(design, t), epoch_of(design, u)
    ft, fu = design.f[a, h], design.f[b, h]
    ci = bit[:, pos[0]] - ft
    cj = bit[:, pos[1]] - ft
    ck = bit[:, pos[2]] - fu
    cl = bit[:, pos[3]] - fu
    four = float((ci * cj) @ J @ (ck * cl))
    pa, pb = J.sum(axis=1), J.sum(axis=0)
    return four - float(pa @ (ci * cj)) * float(pb @ (ck * cl))


def fourth_order_C(design: ValidatedDesign, h: int, t: float, u: float) -> tuple[float, float]:
    """Exact distinct-unit indicator moment combinations ``(C1, C2)`` for stratum ``h``."""
    if int(design.strata_sizes[h]) < 4:
        raise ValidationError("fourth_order_C needs a stratum with at least 4 units")
    J = indicator_joint(design, h, 4, t, u)
    S = 16
    has = np.array([[A >> p & 1 for p in range(4)] for A in range(S)], dtype=float)

    def m(a_bits, b_bits):
        left = np.prod(has[:, a_bits], axis=1)
        right = np.prod(has[:, b_bits], axis=1)
        return float(left @ J @ right)

    e_ik = m([0], [1])
    e_ij_k = m([0, 1], [2])
    e_i_kl = m([0], [1, 2])
    e_all = m([0, 1], [2, 3])
    e_iikk = m([0, 1], [0, 1])
    e_iijk = m([0, 1], [0, 2])
    C1 = e_ik - e_ij_k - e_i_kl + e_all
    C2 = 2 * e_iikk - 4 * e_iijk + 2 * e_all
    return C1, C2
