from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import block_pop, make_design
from oracles import partial_paths
from rotfda.designs import (
    CONVENTIONAL,
    FIXED_PANEL,
    FULL,
    PARTIAL,
    AllocationTrace,
    DesignSpec,
    RotationPattern,
    conventional_path,
    enumerate_stratum_paths,
    epoch_of,
    initial_sample,
    iter_epochs,
    lambda_epochs,
    lambda_kernel,
    pi_kk_epochs,
    retention_prob,
    round_half_up,
    sample_path,
    step_full,
    step_partial,
    stream,
    subset_chain_joint,
    two_unit_chain,
    two_unit_chain_exact,
    validate_design,
)
from rotfda.errors import CapacityError, ValidationError


def z_ok(est, p, n, k=4.0):
    return abs(est - p) <= k * np.sqrt(p * (1 - p) / n) + 1e-12


# --- validation ---------------------------------------------------------------


def test_fixed_panel_has_no_turnover():
    d = make_design(block_pop([10]), FIXED_PANEL, [4], m=2)
    assert d.discards.tolist() == [[0], [0]] and d.adds.tolist() == [[0], [0]]
    assert d.is_static


def test_partial_counts_and_rounding():
    d = make_design(block_pop([4]), PARTIAL, [2], alpha=0.5, m=1)
    assert (d.discards[0, 0], d.adds[0, 0]) == (1, 1) and not d.rounded
    d = make_design(block_pop([10]), PARTIAL, [3], alpha=0.5, m=1)
    assert d.discards[0, 0] == 2 and d.rounded
    assert "1.5" in d.rounding_notes[0]


def test_round_half_up():
    assert round_half_up(np.array([0.5, 1.5, 2.5, 2.4999])).tolist() == [1, 2, 3, 2]


def test_infeasible_transition_rejected():
    pop = block_pop([6])
    with pytest.raises(ValidationError, match="infeasible"):
        make_design(pop, PARTIAL, [[4], [6]], alpha=0.5)
    with pytest.raises(ValidationError, match="infeasible"):
        make_design(pop, PARTIAL, [[4], [1]], alpha=0.25)


def test_bad_replacement_times_rejected():
    pop = block_pop([6])
    for taus in ((0.0,), (4.0,), (5.0,), (2.0, 1.0), (2.0, 2.2)):
        with pytest.raises(ValidationError):
            make_design(pop, PARTIAL, [2], alpha=0.5, taus=taus)


def test_allocation_shape_and_bounds_rejected():
    pop = block_pop([3, 3])
    with pytest.raises(ValidationError):
        make_design(pop, FULL, [2, 4])
    with pytest.raises(ValidationError):
        make_design(pop, FULL, [0, 2])
    with pytest.raises(ValidationError):
        validate_design(DesignSpec.uniform(FULL, 4.0, 2), AllocationTrace.constant([2, 2], 1), pop)
    with pytest.raises(ValidationError):
        make_design(pop, FIXED_PANEL, [2, 2], alpha=0.1)


def test_epoch_of_examples():
    pop = block_pop([4], T=48.0, points=49)
    d = make_design(pop, FULL, [2], taus=(12.0, 24.0, 36.0))
    assert epoch_of(d, 13.0) == 1
    assert epoch_of(d, 0.0) == 0
    assert epoch_of(d, 12.0) == 1
    assert epoch_of(d, 48.0) == d.m == 3
    with pytest.raises(ValidationError):
        epoch_of(d, 49.0)


# --- sampling primitives ------------------------------------------------------


def test_initial_sample_census_and_uniform_subsets():
    pop = block_pop([4])
    census = make_design(pop, FULL, [4])
    assert initial_sample(census, 1).all()
    d = make_design(pop, FULL, [2])
    R = 60_000
    mk = initial_sample(d, 11, batch=(R,))
    assert np.all(mk.sum(axis=1) == 2)
    codes, counts = np.unique(mk @ (1 << np.arange(4)), return_counts=True)
    assert codes.size == 6
    for c in counts:
        assert z_ok(c / R, 1 / 6, R)


def test_step_full_independent_of_previous_sample():
    rng = stream(5, 1)
    R = 100_000
    state = np.zeros((R, 5), dtype=bool)
    state[:, :2] = True
    nxt = step_full(state, 3, rng)
    assert np.all(nxt.sum(axis=1) == 3)
    # whatever the previous sample, each unit enters with probability 3/5
    for k in range(5):
        assert z_ok(nxt[:, k].mean(), 0.6, R)
    assert np.array_equal(step_full(state[:8], 5, rng), np.ones((8, 5), dtype=bool))


def test_step_partial_examples():
    rng = stream(9)
    state = np.array([[True, True, False, False]] * 5000)
    assert np.array_equal(step_partial(state, 2, 0.0, rng), state)
    assert np.array_equal(step_partial(state, 2, 1.0, rng), ~state)
    nxt = step_partial(state, 2, 0.5, rng)
    assert np.all(nxt.sum(axis=1) == 2)
    assert np.all((nxt & state).sum(axis=1) == 1)
    with pytest.raises(ValidationError):
        step_partial(state, 4, 0.5, rng)


def test_step_partial_retention_matches_enumeration():
    paths = partial_paths(4, [2, 2], [1])
    keep = sum(p for path, p in paths.items() if 0 in path[0] and 0 in path[1]) / Fraction(1, 2)
    assert keep == Fraction(1, 2)
    rng = stream(3)
    R = 80_000
    state = np.zeros((R, 4), dtype=bool)
    state[:, [0, 2]] = True
    nxt = step_partial(state, 2, 0.5, rng)
    assert z_ok(nxt[:, 0].mean(), 0.5, R)
    assert z_ok(nxt[:, 1].mean(), 0.5, R)


def test_iter_epochs_deterministic():
    d = make_design(block_pop([30, 20], points=9), PARTIAL, [6, 4], alpha=0.5, m=3)
    a = sample_path(d, 42, (7,))
    b = sample_path(d, 42, (7,))
    c = sample_path(d, 42, (8,))
    assert np.array_equal(a.masks, b.masks)
    assert not np.array_equal(a.masks, c.masks)


designs_st = st.tuples(
    st.lists(st.integers(4, 12), min_size=1, max_size=3),
    st.integers(1, 4),
    st.floats(0.0, 1.0),
    st.integers(0, 2**32),
)


@given(designs_st)
def test_partial_paths_keep_cardinality_and_add_fresh_units(data):
    Nh, m, alpha, seed = data
    pop = block_pop(Nh, points=2 * m + 3)
    sizes = [max(1, N // 3) for N in Nh]
    d = make_design(pop, PARTIAL, sizes, alpha=alpha, m=m)
    prev = None
    for r, mask, sz in iter_epochs(d, seed, batch=(16,)):
        for h, idx in enumerate(d.members):
            assert np.all(mask[:, idx].sum(axis=1) == d.sizes[r, h])
            if prev is not None:
                kept = (mask[:, idx] & prev[:, idx]).sum(axis=1)
                assert np.all(kept == d.sizes[r - 1, h] - d.discards[r - 1, h])
                added = mask[:, idx] & ~prev[:, idx]
                assert np.all(added.sum(axis=1) == d.adds[r - 1, h])
        prev = mask


def test_strata_sampled_independently():
    d = make_design(block_pop([6, 6]), PARTIAL, [3, 3], alpha=0.34, m=1)
    R = 60_000
    masks = np.stack([mk for _, mk, _ in iter_epochs(d, 8, batch=(R,))])
    x, y = masks[1, :, 0].astype(float), masks[1, :, 6].astype(float)
    cov = np.mean(x * y) - x.mean() * y.mean()
    assert abs(cov) <= 4 * 0.25 / np.sqrt(R)


# --- conventional rotation ----------------------------------------------------


PATTERN = RotationPattern(((0, 1, 4, 5), (1, 2, 5, 6), (2, 3, 6, 7)))


def test_conventional_identity_permutation_is_the_pattern():
    pop = block_pop([4, 4])
    path = conventional_path(PATTERN, 0, pop, permutations=[range(4), range(4)])
    for r, slots in enumerate(PATTERN.slots):
        assert np.flatnonzero(path.masks[r]).tolist() == list(slots)


def test_conventional_preserves_overlaps_and_marginals():
    pop = block_pop([4, 4])
    path = conventional_path(PATTERN, 3, pop)
    assert np.all(path.masks.sum(axis=1) == 4)
    assert (path.masks[0] & path.masks[1]).sum() == 2 and (path.masks[0] & path.masks[2]).sum() == 0
    with pytest.raises(ValidationError):
        conventional_path(PATTERN, 3, pop, permutations=[[0, 0, 1, 2], range(4)])
    d = make_design(pop, CONVENTIONAL, [[2, 2]] * 3, pattern=PATTERN)
    R = 100_000
    masks = np.stack([mk for _, mk, _ in iter_epochs(d, 1, batch=(R,))])
    for r in range(3):
        for k in range(8):
            assert z_ok(masks[r, :, k].mean(), 0.5, R)


# --- exact marginals and inclusion kernels -------------------------------------


def test_marginals_exact_by_enumeration():
    d = make_design(block_pop([4]), PARTIAL, [2], alpha=0.5, m=2)
    ours = dict((path, p) for p, path in enumerate_stratum_paths(d, 0, exact=True))
    ref = partial_paths(4, [2, 2, 2], [1, 1])
    assert {tuple(frozenset(s) for s in path): p for path, p in ours.items()} == ref
    for r in range(3):
        subset_law = {}
        for path, p in ours.items():
            subset_law[path[r]] = subset_law.get(path[r], 0) + p
        assert len(subset_law) == 6 and set(subset_law.values()) == {Fraction(1, 6)}
        for k in range(4):
            assert sum(p for path, p in ours.items() if k in path[r]) == Fraction(1, 2)


def test_enumeration_capacity():
    d = make_design(block_pop([30]), FULL, [10], m=2)
    with pytest.raises(CapacityError):
        enumerate_stratum_paths(d, 0)


def _lam_design(alpha, m=2, f_sizes=(20,), N=400):
    points = 5 if m <= 2 else 2 * m + 3
    return make_design(block_pop([N], points=points), PARTIAL, list(f_sizes), alpha=alpha, m=m)


def test_lambda_examples():
    d = _lam_design(0.0)
    assert lambda_kernel(d, 0, 0.0, 4.0) == 1.0
    d = _lam_design(0.1)  # f = 0.05, alpha * n = 2
    assert lambda_kernel(d, 0, 0.5, 1.5) == pytest.approx(0.894737, abs=5e-7)
    assert lambda_kernel(d, 0, 0.5, 3.5) == pytest.approx(0.800554, abs=5e-7)
    assert lambda_kernel(d, 0, 3.5, 0.5) == lambda_kernel(d, 0, 0.5, 3.5)
    full = make_design(block_pop([400]), FULL, [20], m=2)
    assert np.array_equal(lambda_epochs(full, 0), np.eye(3))
    d = _lam_design(0.95)  # alpha = 1 - f
    assert lambda_kernel(d, 0, 0.5, 1.5) == pytest.approx(0.0, abs=1e-15)


@given(st.floats(0.0, 1.0), st.integers(1, 4))
def test_lambda_sign_alternates_when_rate_exceeds_complement(alpha, m):
    d = _lam_design(alpha, m=m, N=200, f_sizes=(20,))
    a = d.alpha_eff[0, 0]
    factor = (1 - a - 0.1) / 0.9
    L = lambda_epochs(d, 0)
    for r in range(m + 1):
        assert L[0, r] == pytest.approx(factor**r, abs=1e-12)
        if abs(factor) > 1e-12:
            assert np.sign(L[0, r]) == np.sign(factor) ** r


def _chain_design(draw_sizes, Nh, alpha, points=12):
    pop = block_pop([Nh], points=points)
    return make_design(pop, PARTIAL, [[s] for s in draw_sizes], alpha=alpha)


varying = st.tuples(
    st.integers(8, 14),
    st.lists(st.integers(2, 6), min_size=2, max_size=4),
    st.floats(0.0, 1.0),
)


@given(varying)
def test_retention_matches_exact_markov_chain(data):
    Nh, sizes, alpha = data
    try:
        d = _chain_design(sizes, Nh, alpha)
    except ValidationError:
        return
    starts = d.grid.t_points[d.epoch_starts]
    for a in range(d.m + 1):
        for b in range(a, d.m + 1):
            J = subset_chain_joint(d, 0, 1, a, b)
            p_in = J[1].sum()
            exact_in = J[1, 1] / p_in
            exact_out = J[0, 1] / J[0].sum() if J[0].sum() > 0 else None
            kin, kout = retention_prob(d, 0, starts[a], starts[b])
            assert kin == pytest.approx(exact_in, abs=1e-12)
            if exact_out is not None:
                assert kout == pytest.approx(exact_out, abs=1e-12)
            # law of total probability
            ft, fu = d.f[a, 0], d.f[b, 0]
            assert ft * kin + (1 - ft) * kout == pytest.approx(fu, abs=1e-12)
            assert pi_kk_epochs(d, 0)[a, b] == pytest.approx(J[1, 1], abs=1e-12)


def test_retention_matches_enumeration_small():
    d = make_design(block_pop([4]), PARTIAL, [2], alpha=0.5, m=2)
    paths = partial_paths(4, [2, 2, 2], [1, 1])
    starts = d.grid.t_points[d.epoch_starts]
    for a in range(3):
        for b in range(a, 3):
            inn = sum(p for path, p in paths.items() if 0 in path[a])
            both = sum(p for path, p in paths.items() if 0 in path[a] and 0 in path[b])
            out_in = sum(p for path, p in paths.items() if 0 not in path[a] and 0 in path[b])
            kin, kout = retention_prob(d, 0, starts[a], starts[b])
            assert abs(kin - float(both / inn)) <= 1e-12
            assert abs(kout - float(out_in / (1 - inn))) <= 1e-12
    with pytest.raises(ValidationError):
        retention_prob(d, 0, 3.0, 1.0)


# --- two-unit chains ----------------------------------------------------------


def test_two_unit_chain_examples():
    d = make_design(block_pop([400]), PARTIAL, [200], alpha=0.25, m=1)
    assert np.array_equal(two_unit_chain(d, 0, 0.5, 1.5), np.eye(3))
    Q = two_unit_chain(d, 0, 0.5, 3.5)
    assert np.allclose(Q[1], [0.1875, 0.625, 0.1875], atol=1e-15)
    assert np.allclose(Q.sum(axis=1), 1.0, atol=1e-15)


@given(st.lists(st.integers(50, 950), min_size=2, max_size=5), st.floats(0.0, 1.0))
def test_two_unit_chain_identities(sizes, alpha):
    try:
        d = _chain_design(sizes, 1000, alpha)
    except ValidationError:
        return
    f = d.f[:, 0]
    L = lambda_epochs(d, 0)
    starts = d.grid.t_points[d.epoch_starts]
    for r in range(1, d.m + 1):
        Q = two_unit_chain(d, 0, starts[0], starts[r])
        half_diag = Q[0, 0] ** 0.5
        half_off = Q[0, 2] ** 0.5
        assert half_off == pytest.approx(f[r] - f[0] * L[0, r], abs=1e-12)
        assert half_diag + half_off == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(Q.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(Q >= -1e-15)


def test_two_unit_chain_finite_population_error_halves():
    errs = []
    for Nh in (20, 40, 80):
        d = make_design(block_pop([Nh], points=6), PARTIAL, [Nh // 4], alpha=0.4, m=3)
        t, u = 0.0, 5.0
        errs.append(np.abs(two_unit_chain_exact(d, 0, t, u) - two_unit_chain(d, 0, t, u)).max())
    assert errs[0] > errs[1] > errs[2] > 0
    for a, b in zip(errs, errs[1:]):
        assert 1.6 <= a / b <= 2.5
