import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import block_pop, make_design, oracle_paths
from rotfda.analytics import (
    CovKernel,
    corollary_decay,
    cov_full,
    cov_kernel,
    cov_partial,
    delta_ijkl,
    fourth_order_C,
    mise,
    var_ise_corollary,
    var_ise_exact_small,
    var_ise_full_asym,
    var_ise_partial_asym,
)
from rotfda.designs import FIXED_PANEL, FULL, PARTIAL
from rotfda.errors import CapacityError, ValidationError
from rotfda.estimators import ht_series
from rotfda.population import (
    StratumSpec,
    TimeGrid,
    population_mean,
    stratum_covariance_matrix,
    synth_population,
)


def two_point_pop(N=100, var=4.0, T=4.0, points=9):
    """One stratum whose curves are constant at +a or -a with variance ``var`` at every time."""
    a = math.sqrt(var * (N - 1) / N)
    vals = np.where(np.arange(N)[:, None] < N // 2, a, -a) * np.ones((1, points))
    return block_pop([N], T=T, points=points, values=vals)


@pytest.fixture(scope="module")
def smooth_pop():
    g = TimeGrid.from_spacing(12.0, 0.5)
    return synth_population([StratumSpec(120, 1.0, 0.05, level=1.0), StratumSpec(80, 3.0, 0.2, amplitude=1.0)], g, 33)


# --- covariance kernels -------------------------------------------------------


def test_srswor_variance_example():
    pop = two_point_pop()
    assert stratum_covariance_matrix(pop, 0)[3, 3] == pytest.approx(4.0, abs=1e-12)
    for kind in (FULL, PARTIAL):
        d = make_design(pop, kind, [25], alpha=0.4, m=2)
        K = cov_kernel(pop, d)
        assert np.allclose(K.variance, 0.12, rtol=0, atol=1e-12)
        assert K.variance[0] == pytest.approx((1 / 25 - 1 / 100) * 4.0, abs=1e-12)


def test_full_kernel_is_block_diagonal_and_zero_at_census(smooth_pop):
    d = make_design(smooth_pop, FULL, [30, 20], m=3)
    K = cov_full(smooth_pop, d).values
    e = d.epoch_of_grid
    assert np.all(K[e[:, None] != e[None, :]] == 0.0)
    census = make_design(smooth_pop, FULL, [120, 80], m=3)
    assert np.all(cov_full(smooth_pop, census).values == 0.0)
    with pytest.raises(ValidationError):
        cov_full(smooth_pop, make_design(smooth_pop, PARTIAL, [30, 20], alpha=0.5, m=3))
    with pytest.raises(ValidationError):
        cov_partial(smooth_pop, d)


def test_fixed_panel_kernel(smooth_pop):
    pop = smooth_pop
    d = make_design(pop, FIXED_PANEL, [30, 20], m=3)
    K = cov_partial(pop, d).values
    ref = sum(pop.strata_sizes[h] * (pop.strata_sizes[h] / n - 1) * stratum_covariance_matrix(pop, h)
              for h, n in enumerate((30, 20))) / pop.N**2
    assert np.allclose(K, ref, rtol=0, atol=1e-13)


def test_equivalence_point_matches_full_replacement(smooth_pop):
    pop = smooth_pop
    # alpha_h = 1 - f_h with f = (1/2, 1/4)
    part = make_design(pop, PARTIAL, [60, 20], alpha=(0.5, 0.75), m=4)
    assert not part.rounded
    full = make_design(pop, FULL, [60, 20], m=4)
    assert np.allclose(cov_partial(pop, part).values, cov_full(pop, full).values, rtol=0, atol=1e-12)


def test_kernel_decays_geometrically_across_epochs():
    pop = two_point_pop(N=200, points=11, T=10.0)
    d = make_design(pop, PARTIAL, [50], alpha=0.2, m=4)
    K = cov_partial(pop, d).values
    starts = d.epoch_starts
    rate = 1 - 0.2 / (1 - 0.25)
    for a in range(4):
        assert K[starts[0], starts[a + 1]] / K[starts[0], starts[a]] == pytest.approx(rate, abs=1e-12)


@given(st.floats(0.0, 1.0), st.integers(0, 5))
def test_kernels_symmetric_with_srswor_diagonal(alpha, m):
    pop = synth_population([StratumSpec(40, 2.0, 0.3), StratumSpec(30, 1.0, 0.1)], TimeGrid.uniform(6.0, 13), 5)
    d = make_design(pop, PARTIAL, [8, 6], alpha=alpha, m=m)
    K = cov_partial(pop, d)
    assert np.array_equal(K.values, K.values.T)
    diag = sum(pop.strata_sizes[h] ** 2 * (1 / n - 1 / pop.strata_sizes[h]) * np.diag(stratum_covariance_matrix(pop, h))
               for h, n in enumerate((8, 6))) / pop.N**2
    assert np.allclose(K.variance, diag, rtol=1e-12, atol=1e-14)
    assert np.all(K.variance >= 0)


def test_kernel_csv_round_trip(tmp_path, smooth_pop):
    d = make_design(smooth_pop, PARTIAL, [30, 20], alpha=0.3, m=3)
    K = cov_partial(smooth_pop, d)
    K.to_csv(tmp_path / "k.csv")
    back = CovKernel.from_csv(tmp_path / "k.csv")
    assert np.array_equal(back.values, K.values)
    assert np.array_equal(back.values, back.values.T)
    assert back.grid == K.grid
    with pytest.raises(ValidationError):
        CovKernel(K.grid, K.values + np.triu(np.ones_like(K.values), 1))


# --- MISE -----------------------------------------------------------------------


def test_mise_examples(smooth_pop):
    g = TimeGrid.uniform(5.0, 11)
    assert mise(CovKernel(g, np.zeros((11, 11)))) == 0.0
    assert mise(CovKernel(g, 0.7 * np.eye(11))) == pytest.approx(3.5, abs=1e-13)
    vals = [mise(cov_partial(smooth_pop, make_design(smooth_pop, PARTIAL, [30, 20], alpha=a, m=3)))
            for a in (0.0, 0.2, 0.5, 1.0)]
    assert np.allclose(vals, vals[0], rtol=1e-13)


# --- asymptotic Var(ISE) --------------------------------------------------------


def test_full_asym_closed_form():
    T, N, n, c = 4.0, 100, 25, 4.0
    pop = two_point_pop(N, c, T=T, points=41)
    d = make_design(pop, FULL, [n], m=3)
    f = n / N
    expected = 2 * T**2 * c**2 / (3 * N**2) * ((1 - f) / f) ** 2
    assert var_ise_full_asym(pop, d) == pytest.approx(expected, rel=1e-10)
    d6 = make_design(pop, FULL, [n], m=7)
    assert var_ise_full_asym(pop, d6) == pytest.approx(var_ise_full_asym(pop, d) * 3 / 7, rel=1e-13)
    census = make_design(pop, FULL, [N], m=3)
    assert var_ise_full_asym(pop, census) == 0.0


def test_full_asym_halves_when_m_doubles(smooth_pop):
    a = var_ise_full_asym(smooth_pop, make_design(smooth_pop, FULL, [30, 20], m=5))
    b = var_ise_full_asym(smooth_pop, make_design(smooth_pop, FULL, [30, 20], m=10))
    assert a / b == pytest.approx(2.0, rel=1e-13)


def test_full_asym_density_normalization(smooth_pop):
    g = smooth_pop.grid
    spec_uniform = make_design(smooth_pop, FULL, [30, 20], m=5)
    flat = make_design(smooth_pop, FULL, [30, 20], taus=tuple(spec_uniform.tau), density=tuple([3.0] * g.size))
    assert var_ise_full_asym(smooth_pop, flat) == pytest.approx(var_ise_full_asym(smooth_pop, spec_uniform), rel=1e-13)


def test_partial_asym_fixed_panel_closed_form():
    T, N, n, c = 4.0, 100, 20, 4.0
    pop = two_point_pop(N, c, T=T, points=21)
    d = make_design(pop, FIXED_PANEL, [n], m=2)
    f = n / N
    expected = 2 * c**2 * T**2 / N**2 * ((1 - f) / f) ** 2
    assert var_ise_partial_asym(pop, d) == pytest.approx(expected, rel=1e-12)
    flat = block_pop([N], T=T, points=21, values=np.ones((N, 21)))
    assert var_ise_partial_asym(flat, make_design(flat, PARTIAL, [n], alpha=0.5, m=2)) == 0.0


def test_decay_approx_zero_decay_is_fixed_panel(smooth_pop):
    d = make_design(smooth_pop, FIXED_PANEL, [30, 20], m=3)
    assert var_ise_corollary(smooth_pop, [30, 20], 0.0) == pytest.approx(var_ise_partial_asym(smooth_pop, d), rel=1e-12)


def test_decay_approx_monotone_in_decay(smooth_pop):
    vals = [var_ise_corollary(smooth_pop, [30, 20], c) for c in (0.0, 0.5, 1.0, 2.0, 4.0, 16.0, 100.0, 1e4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # with a very fast decay only the diagonal of the quadrature carries mass
    pop, w = smooth_pop, smooth_pop.grid.weights
    diag = sum(pop.strata_sizes[h] / pop.N * (pop.strata_sizes[h] / n - 1) * np.diag(stratum_covariance_matrix(pop, h))
               for h, n in enumerate((30, 20)))
    assert vals[-1] == pytest.approx(2.0 / pop.N**2 * np.sum(w * w * diag * diag), rel=1e-12)


def test_decay_approx_uniform_G_is_time_over_T(smooth_pop):
    g = smooth_pop.grid
    a = var_ise_corollary(smooth_pop, [30, 20], [1.0, 3.0])
    b = var_ise_corollary(smooth_pop, [30, 20], [1.0, 3.0], G=g.t_points / g.T)
    assert a == b
    with pytest.raises(ValidationError):
        var_ise_corollary(smooth_pop, [30, 20], -1.0)


def test_corollary_decay_constants():
    pop = block_pop([1600], T=10.0, points=21)
    d = make_design(pop, PARTIAL, [800], alpha=0.0025, m=4)
    assert corollary_decay(d) == pytest.approx([0.0025 * 4 / 0.5])
    with pytest.raises(ValidationError):
        corollary_decay(make_design(pop, PARTIAL, [[800], [700], [800]], alpha=0.1))


@pytest.mark.slow
def test_decay_approx_consistent_with_partial_asym_for_large_m():
    g = TimeGrid.from_spacing(10.0, 0.01)
    pop = synth_population([StratumSpec(1600, 1.0, 0.1)], g, 9)
    d = make_design(pop, PARTIAL, [800], alpha=0.0025, m=200)
    c = corollary_decay(d)
    assert c == pytest.approx([1.0])
    a = var_ise_partial_asym(pop, d)
    b = var_ise_corollary(pop, [800], c, d.G_cumulative)
    assert a == pytest.approx(b, rel=0.01)


# --- exact oracles ----------------------------------------------------------------


def _brute_var_ise(pop, design, full=False):
    truth = population_mean(pop)
    vals = []
    for p, path in oracle_paths(design, full=full):
        err = ht_series(pop, path).values - truth.values
        vals.append((float(p), float(pop.grid.weights @ (err * err))))
    m1 = sum(p * v for p, v in vals)
    return sum(p * (v - m1) ** 2 for p, v in vals)


@pytest.mark.parametrize("kind,m,full", [(PARTIAL, 2, False), (FULL, 1, True), (FIXED_PANEL, 2, False)])
def test_exact_var_ise_matches_joint_enumeration(tiny_varying_pop, kind, m, full):
    pop = tiny_varying_pop
    d = make_design(pop, kind, [2, 2], alpha=0.5 if kind == PARTIAL else 0.0, m=m)
    assert var_ise_exact_small(pop, d) == pytest.approx(_brute_var_ise(pop, d, full), rel=1e-10, abs=1e-15)


def test_exact_var_ise_rational_mode():
    vals = np.array([[1.0, 2.0, 0.5], [2.0, -1.0, 0.0], [3.0, 0.5, 1.0], [6.0, 1.0, 2.0]])
    pop = block_pop([4], T=2.0, points=3, values=vals)
    d = make_design(pop, PARTIAL, [2], alpha=0.5, m=1)
    exact = var_ise_exact_small(pop, d, exact=True)
    assert isinstance(exact, Fraction)
    assert float(exact) == pytest.approx(var_ise_exact_small(pop, d), rel=1e-12)
    assert float(exact) == pytest.approx(_brute_var_ise(pop, d), rel=1e-12)
    big = block_pop([5], T=2.0, points=3)
    with pytest.raises(ValidationError):
        var_ise_exact_small(big, make_design(big, PARTIAL, [2], alpha=0.5, m=1), exact=True)


def test_exact_var_ise_zero_variance_and_capacity():
    flat = block_pop([4, 4], values=np.ones((8, 5)))
    d = make_design(flat, PARTIAL, [2, 2], alpha=0.5, m=2)
    assert var_ise_exact_small(flat, d) == 0.0
    big = block_pop([30, 30], points=5)
    with pytest.raises(CapacityError):
        var_ise_exact_small(big, make_design(big, FULL, [10, 10], m=2))


def test_delta_iiii_vanishes_at_half():
    pop = block_pop([4, 6])
    d = make_design(pop, PARTIAL, [2, 3], alpha=0.5, m=2)
    for h in (0, 1):
        assert abs(delta_ijkl(d, h, (0, 0, 0, 0), 1.0, 1.0)) <= 1e-15


def test_fourth_order_moments_fixed_panel_by_subsets():
    pop = block_pop([4])
    d = make_design(pop, FIXED_PANEL, [2], m=1)
    subsets = [set(c) for c in itertools.combinations(range(4), 2)]

    def E(*units):
        return Fraction(sum(1 for s in subsets if set(units) <= s), len(subsets))

    i, j, k, l = range(4)
    C1 = E(i, k) - E(i, j, k) - E(i, k, l) + E(i, j, k, l)
    C2 = 2 * E(i, k) - 4 * E(i, j, k) + 2 * E(i, j, k, l)
    got = fourth_order_C(d, 0, 1.0, 1.0)
    assert got == pytest.approx((float(C1), float(C2)), abs=1e-15)
    assert got == pytest.approx((1 / 6, 1 / 3), abs=1e-15)
    with pytest.raises(ValidationError):
        fourth_order_C(make_design(block_pop([3]), FIXED_PANEL, [2], m=1), 0, 1.0, 1.0)


def test_fourth_order_C2_vanishes_off_block_under_full_replacement():
    scaled = []
    for Nh in (8, 16, 32):
        pop = block_pop([Nh])
        d = make_design(pop, FULL, [Nh // 2], m=1)
        C1, C2 = fourth_order_C(d, 0, 0.0, 4.0)
        assert C1 == pytest.approx(0.0625, abs=2.0 / Nh)
        scaled.append(Nh * abs(C2))
    # C2 is O(1/N_h): N_h |C2| stays bounded and settles
    assert max(scaled) < 2.0
    assert abs(scaled[2] - scaled[1]) < abs(scaled[1] - scaled[0]) + 1e-12
