import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosparse.core import (
    DiscreteMeasure,
    GeoSparseError,
    LogKernel,
    NumericalBreakdown,
    SupportError,
    SupportModel,
    build_support,
    grid_support,
    seeded_rng,
    uniform_simplex,
)
from geosparse.ot import (
    entropic_map,
    exact_nearest,
    exact_w2,
    ibp_barycenter,
    ibp_barycenters,
    line_support,
    mccann_1d,
    pairwise_sinkhorn,
    sinkhorn,
    sinkhorn_costs,
    transport_bounds,
    verify_geodesic_extension,
    w2_1d,
)

from conftest import random_measures


def quantile_w2(x, a, y, b):
    """Squared W2 in 1D by integrating (F^-1 - G^-1)^2 over the levels in [0, 1]."""
    ix, iy = np.argsort(x), np.argsort(y)
    x, a, y, b = np.asarray(x)[ix], np.asarray(a)[ix], np.asarray(y)[iy], np.asarray(b)[iy]
    Fa, Fb = np.cumsum(a), np.cumsum(b)
    Fa[-1] = Fb[-1] = 1.0
    cuts = np.unique(np.concatenate([[0.0], Fa, Fb]))
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        u = 0.5 * (lo + hi)
        qa = x[np.searchsorted(Fa, u)]
        qb = y[np.searchsorted(Fb, u)]
        total += (hi - lo) * (qa - qb) ** 2
    return total


measure_pair = st.integers(2, 16).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**32 - 1))
)


# sinkhorn -----------------------------------------------------------------


def test_sinkhorn_dirac_identity():
    sup = build_support([0.0, 1.0, 2.0], epsilon=0.1)
    cost, plan, err = sinkhorn([0, 1, 0], [0, 1, 0], sup, 5)
    assert cost == 0.0
    assert err < 1e-12


def test_sinkhorn_forced_plan():
    sup = build_support([0.0, 1.0], epsilon=0.05)
    cost, plan, _ = sinkhorn([1, 0], [0, 1], sup, 20)
    assert cost == pytest.approx(1.0, abs=1e-12)
    assert plan.matrix[0, 1] == pytest.approx(1.0)


def test_sinkhorn_three_point_example(line3):
    cost, _, _ = sinkhorn([0.5, 0.5, 0], [0, 0.5, 0.5], line3, 500)
    assert abs(cost - 1.0) <= 0.05


def test_sinkhorn_identity_cost_vanishes_with_epsilon(rng):
    pts = np.linspace(0, 1, 6)
    mu = random_measures(rng, 1, 6)[0]
    costs = [sinkhorn(mu, mu, line_support(pts, eps), int(10 / eps))[0] for eps in (0.1, 0.01, 0.002)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] < 1e-3


def test_sinkhorn_runs_exact_iteration_count(rng):
    sup = grid_support(5, 0.05)
    a, b = random_measures(rng, 2, 5)
    r1 = sinkhorn(a, b, sup, 1)
    r2 = sinkhorn(a, b, sup, 2)
    assert r1.marginal_error != r2.marginal_error
    # the last update is on the target side, so the target marginal is exact
    np.testing.assert_allclose(r1.plan.matrix.sum(0), b, atol=1e-14)


def test_sinkhorn_support_mismatch(line3):
    other = build_support([0.0, 1.0, 5.0], epsilon=0.1)
    with pytest.raises(SupportError):
        sinkhorn(DiscreteMeasure([1, 0, 0], other), [0, 0, 1], line3, 5)


def test_sinkhorn_rejects_zero_iters(line3):
    with pytest.raises(ValueError):
        sinkhorn([1, 0, 0], [0, 0, 1], line3, 0)


def test_plain_scaling_breakdown_reports_iteration():
    # the kernel entry is subnormal, so the first target scaling overflows
    sup = build_support([0.0, 27.2], epsilon=1.0)
    with pytest.raises(NumericalBreakdown) as exc:
        sinkhorn([1, 0], [0, 1], sup, 3, log_domain=False)
    assert exc.value.iteration == 1
    # log domain handles the same instance
    assert sinkhorn([1, 0], [0, 1], sup, 3)[0] == pytest.approx(27.2**2, rel=0.01)


def test_plain_scaling_matches_log_domain(rng):
    sup = grid_support(6, 0.2)
    a, b = random_measures(rng, 2, 6)
    r1 = sinkhorn(a, b, sup, 30)
    r2 = sinkhorn(a, b, sup, 30, log_domain=False)
    np.testing.assert_allclose(r1.plan.matrix, r2.plan.matrix, rtol=1e-10, atol=1e-15)


def test_plan_nonnegative_and_marginals(rng, small_grid):
    a, b = random_measures(rng, 2, 9)
    res = sinkhorn(a, b, small_grid, 50)
    P = res.plan.matrix
    assert np.all(P >= 0)
    direct = np.abs(P.sum(1) - a).sum() + np.abs(P.sum(0) - b).sum()
    assert res.marginal_error == pytest.approx(direct)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 10), st.integers(1, 40), st.integers(0, 10_000))
def test_marginal_error_monotone_by_doubling(n, iters, seed):
    rng = seeded_rng(seed)
    sup = grid_support(n, 0.02)
    a, b = random_measures(rng, 2, n, power=3.0)
    half = sinkhorn(a, b, sup, iters).marginal_error
    full = sinkhorn(a, b, sup, 2 * iters).marginal_error
    assert full <= half + 1e-14


def test_entropic_to_exact_sweep():
    rng = seeded_rng(7)
    pts = rng.random((8, 2))
    worst = {}
    for eps in (0.05, 0.01, 0.002):
        sup = build_support(pts, eps)
        errs = []
        for _ in range(5):
            a, b = random_measures(rng, 2, 8)
            exact = exact_w2(a, b, sup)[0]
            errs.append(abs(sinkhorn(a, b, sup, int(10 / eps))[0] - exact) / exact)
        worst[eps] = max(errs)
    assert worst[0.002] < 0.02


def test_batched_costs_match_single(rng, small_grid):
    X = random_measures(rng, 3, 9)
    Y = random_measures(rng, 2, 9)
    M = pairwise_sinkhorn(X, Y, small_grid, 40)
    for i, j in itertools.product(range(3), range(2)):
        assert M[i, j] == pytest.approx(sinkhorn(X[i], Y[j], small_grid, 40)[0], rel=1e-12)


def test_dual_estimator_close_to_plan_cost(rng, small_grid):
    a, b = random_measures(rng, 2, 9)
    plan = sinkhorn(a, b, small_grid, 200)[0]
    dual = sinkhorn(a, b, small_grid, 200, estimator="dual")[0]
    # the dual value includes the entropy term; both approximate W2^2
    exact = exact_w2(a, b, small_grid)[0]
    assert abs(plan - exact) < 0.05
    assert abs(dual - exact) < 0.2
    with pytest.raises(ValueError):
        sinkhorn(a, b, small_grid, 5, estimator="nope")


def test_separable_kernel_matches_dense(rng):
    sup = grid_support((4, 5), 0.03)
    dense = build_support(sup.points, 0.03)
    assert dense.axes is None
    A = random_measures(rng, 3, 20)
    B = random_measures(rng, 3, 20)
    np.testing.assert_allclose(
        sinkhorn_costs(A, B, sup, 30), sinkhorn_costs(A, B, dense, 30), rtol=1e-10
    )
    lam = random_measures(rng, 2, 3)
    np.testing.assert_allclose(
        ibp_barycenters(A, lam, sup, 30), ibp_barycenters(A, lam, dense, 30), rtol=1e-9, atol=1e-14
    )


def test_wide_range_kernel_converges():
    # cost/eps reaches 700 here; a shifted exp-matmul product stalls this pair at
    # marginal error 0.21 with cost 0.89 against an exact 0.76
    rng = seeded_rng(0)
    pts = rng.random((8, 2))
    a, b = [uniform_simplex(rng, 2, 8) for _ in range(20)][5]
    sup = build_support(pts, 0.002)
    assert sup.exact_lse
    res = sinkhorn(a, b, sup, 5000)
    assert res.marginal_error < 1e-2
    assert res[0] == pytest.approx(exact_w2(a, b, sup)[0], rel=0.02)


@pytest.mark.parametrize("grid", [False, True])
def test_exact_and_fast_paths_agree(rng, monkeypatch, grid):
    make = (lambda: grid_support((2, 3), 0.05)) if grid else (lambda: build_support(rng.random((6, 2)), 0.05))
    fast = make()
    A = random_measures(rng, 3, 6)
    B = random_measures(rng, 3, 6)
    lam = random_measures(rng, 2, 3)
    expect = [sinkhorn_costs(A, B, fast, 50, est) for est in ("plan", "dual")]
    expect.append(ibp_barycenters(A, lam, fast, 50))
    # force the exact path on a well-conditioned kernel
    monkeypatch.setattr(SupportModel, "exact_lse", property(lambda self: True))
    slow = build_support(fast.points, 0.05, axes=fast.axes)
    assert isinstance(slow.kernel_op, LogKernel)
    got = [sinkhorn_costs(A, B, slow, 50, est) for est in ("plan", "dual")]
    got.append(ibp_barycenters(A, lam, slow, 50))
    for e, g in zip(expect, got):
        np.testing.assert_allclose(g, e, rtol=1e-10)


# exact W2 -----------------------------------------------------------------


def test_exact_identity(rng, small_grid):
    a = random_measures(rng, 1, 9)[0]
    assert exact_w2(a, a, small_grid)[0] == 0.0


def test_exact_diracs_distance_25():
    sup = build_support([[0.0, 0.0], [3.0, 4.0]])
    cost, plan = exact_w2([1, 0], [0, 1], sup)
    assert cost == 25.0
    assert plan.matrix[0, 1] == 1.0


def test_exact_quantile_example():
    sup = build_support([0.0, 1.0, 2.0, 3.0])
    a, b = [0.25] * 4, [0, 0.5, 0, 0.5]
    oracle = quantile_w2(np.arange(4.0), np.array(a), np.arange(4.0), np.array(b))
    assert oracle == pytest.approx(0.5)
    assert exact_w2(a, b, sup)[0] == pytest.approx(oracle, abs=1e-8)


def test_exact_size_guard():
    from geosparse.ot import EXACT_MAX_SIZE

    sup = grid_support(EXACT_MAX_SIZE + 1)
    w = np.full(sup.size, 1.0 / sup.size)
    with pytest.raises(GeoSparseError):
        exact_w2(w, w, sup)


def test_exact_handles_widely_spread_masses():
    # masses spanning many decades used to be misreported as infeasible
    sup = grid_support((6, 6))
    rng = seeded_rng(3)
    a = rng.random(36) ** 30
    a /= a.sum()
    b = rng.random(36)
    b /= b.sum()
    cost, plan = exact_w2(a, b, sup)
    assert cost > 0
    assert plan.marginal_error < 1e-8


@settings(max_examples=30, deadline=None)
@given(measure_pair)
def test_exact_symmetric(case):
    n, seed = case
    rng = seeded_rng(seed)
    sup = build_support(rng.random((n, 2)))
    a, b = random_measures(rng, 2, n, power=2.0)
    ab, ba = exact_w2(a, b, sup)[0], exact_w2(b, a, sup)[0]
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(measure_pair)
def test_exact_triangle(case):
    n, seed = case
    rng = seeded_rng(seed)
    sup = build_support(rng.random((n, 2)))
    a, b, c = random_measures(rng, 3, n, power=2.0)
    d = lambda p, q: np.sqrt(exact_w2(p, q, sup)[0])  # noqa: E731
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-8


@settings(max_examples=30, deadline=None)
@given(measure_pair)
def test_exact_matches_quantile_in_1d(case):
    n, seed = case
    rng = seeded_rng(seed)
    x = np.sort(rng.normal(size=n))
    sup = line_support(x)
    a, b = random_measures(rng, 2, n, power=2.0)
    assert exact_w2(a, b, sup)[0] == pytest.approx(quantile_w2(x, a, x, b), abs=1e-8)
    assert w2_1d(a, b, sup) == pytest.approx(quantile_w2(x, a, x, b), abs=1e-12)


# certified bounds ---------------------------------------------------------


def test_transport_bounds_sandwich_exact(rng, small_grid):
    a = random_measures(rng, 1, 9)[0]
    B = random_measures(rng, 6, 9, power=3.0)
    lower, upper = transport_bounds(a, B, small_grid, 30)
    exact = np.array([exact_w2(a, b, small_grid)[0] for b in B])
    assert np.all(lower <= exact + 1e-10)
    assert np.all(exact <= upper + 1e-10)


def test_exact_nearest_matches_brute_force():
    rng = seeded_rng(11)
    sup = grid_support((4, 4), 0.02)
    for _ in range(5):
        a = random_measures(rng, 1, 16, power=3.0)[0]
        C = random_measures(rng, 8, 16, power=3.0)
        exact = [exact_w2(a, c, sup)[0] for c in C]
        idx, cost = exact_nearest(a, C, sup)
        assert idx == int(np.argmin(exact))
        assert cost == pytest.approx(min(exact), rel=1e-12)


def test_exact_nearest_tie_goes_to_lowest_index(rng, small_grid):
    a = random_measures(rng, 1, 9)[0]
    c = random_measures(rng, 1, 9)[0]
    far = np.zeros(9)
    far[8] = 1.0
    assert exact_nearest(a, [far, c, c], small_grid)[0] == 1


# barycenters --------------------------------------------------------------


def test_single_atom_converges_to_atom(rng):
    pts = np.linspace(0, 1, 7)
    atom = random_measures(rng, 1, 7)[0]
    errs = []
    for eps in (0.05, 0.01, 0.002):
        p = ibp_barycenter([atom], [1.0], line_support(pts, eps), 10).weights
        errs.append(np.abs(p - atom).sum())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def test_one_hot_weight_equals_single_atom(rng, small_grid):
    atoms = random_measures(rng, 3, 9)
    p = ibp_barycenter(atoms, [0, 1, 0], small_grid, 20).weights
    q = ibp_barycenter([atoms[1]], [1.0], small_grid, 20).weights
    np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-14)


def test_two_dirac_midpoint():
    sup = build_support([0.0, 0.5, 1.0], epsilon=0.005)
    p = ibp_barycenter([[1, 0, 0], [0, 0, 1]], [0.5, 0.5], sup, 200).weights
    assert p[1] > 0.99

    def objective(q):
        return 0.5 * exact_w2(q, [1, 0, 0], sup)[0] + 0.5 * exact_w2(q, [0, 0, 1], sup)[0]

    # exhaustive minimization over a simplex lattice
    h = 40
    best = min(
        (objective(np.array([i, j, h - i - j]) / h), (i, j))
        for i in range(h + 1)
        for j in range(h + 1 - i)
    )
    assert best[1] == (0, h)
    assert best[0] == pytest.approx(0.25)
    assert objective(p) == pytest.approx(0.25, abs=0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_barycenter_permutation_equivariant(m, seed):
    rng = seeded_rng(seed)
    sup = grid_support((3, 3), 0.05)
    atoms = random_measures(rng, m, 9)
    lam = random_measures(rng, 1, m)[0]
    perm = rng.permutation(m)
    p = ibp_barycenter(atoms, lam, sup, 15).weights
    q = ibp_barycenter(atoms[perm], lam[perm], sup, 15).weights
    assert np.array_equal(p, q)


def test_barycenter_floors_zero_atoms(small_grid):
    from geosparse.ot import Diagnostics

    diag = Diagnostics()
    atoms = np.eye(9)[[0, 8]]
    p = ibp_barycenter(atoms, [0.5, 0.5], small_grid, 20, diagnostics=diag)
    assert np.isclose(p.weights.sum(), 1.0)
    assert diag.count("log_floor") > 0


def test_barycenter_weight_validation(rng, small_grid):
    atoms = random_measures(rng, 2, 9)
    with pytest.raises(ValueError):
        ibp_barycenter(atoms, [0.5, 0.6], small_grid, 5)
    with pytest.raises(ValueError):
        ibp_barycenter(atoms, [1.0], small_grid, 5)


# transport maps -----------------------------------------------------------


def test_map_identity(rng):
    pts = np.linspace(0, 1, 5)
    mu = random_measures(rng, 1, 5)[0]
    est = entropic_map(mu, mu, line_support(pts, 2e-3), 200)
    np.testing.assert_allclose(est.images[:, 0], pts, atol=1e-6)


def test_map_dirac_forced():
    sup = build_support([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]], epsilon=0.1)
    est = entropic_map([1, 0, 0], [0, 0, 1], sup, 3)
    np.testing.assert_array_equal(est.images[0], [3.0, 1.0])
    assert est.valid_mask.tolist() == [True, False, False]
    assert np.all(est.displacements(sup.points)[1:] == 0)


def test_map_monotone_1d():
    sup = line_support([0.0, 1.0, 2.0, 3.0], 0.02)
    est = entropic_map([0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5], sup, 300)
    np.testing.assert_allclose(est.images[:2, 0], [2.0, 3.0], atol=5e-3)


# McCann interpolation and the extension inequality ------------------------


def test_mccann_endpoints(rng):
    sup = line_support(np.linspace(0, 1, 8))
    a, b = random_measures(rng, 2, 8)
    np.testing.assert_array_equal(mccann_1d(a, b, 0.0, sup).weights, DiscreteMeasure(a).weights)
    np.testing.assert_array_equal(mccann_1d(a, b, 1.0, sup).weights, DiscreteMeasure(b).weights)


def test_mccann_dirac_midpoint():
    sup = line_support([0.0, 0.5, 1.0])
    np.testing.assert_allclose(mccann_1d([1, 0, 0], [0, 0, 1], 0.5, sup).weights, [0, 1, 0])


def test_mccann_snap_preserves_mean(rng):
    g = np.linspace(0, 1, 11)
    sup = line_support(g)
    a, b = random_measures(rng, 2, 11)
    for t in (0.13, 0.5, 0.77):
        w = mccann_1d(a, b, t, sup).weights
        assert w @ g == pytest.approx((1 - t) * (a @ g) + t * (b @ g), abs=1e-12)


def test_mccann_constant_speed():
    g = np.linspace(0, 1, 64)
    sup = line_support(g)
    mu = np.exp(-((g - 0.2) ** 2) / 0.005)
    nu = np.exp(-((g - 0.75) ** 2) / 0.01)
    mu, nu = mu / mu.sum(), nu / nu.sum()
    total = np.sqrt(exact_w2(mu, nu, sup)[0])
    for t in (0.25, 0.5, 0.75):
        d = np.sqrt(exact_w2(mu, mccann_1d(mu, nu, t, sup), sup)[0])
        assert d == pytest.approx(t * total, rel=0.02)


def test_mccann_rejects_2d(small_grid):
    with pytest.raises(SupportError):
        mccann_1d(np.full(9, 1 / 9), np.full(9, 1 / 9), 0.5, small_grid)


def test_extension_dirac_example():
    sup = line_support([0.0, 1.0, 2.0])
    (chk,) = verify_geodesic_extension([1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5], sup)
    assert chk.lhs == pytest.approx(0.25)
    assert chk.s == pytest.approx(0.25)
    assert chk.rhs == pytest.approx(0.75)


def test_extension_trivial_case_is_equality(rng):
    sup = line_support(np.linspace(0, 1, 9))
    a, b = random_measures(rng, 2, 9)
    for chk in verify_geodesic_extension(a, b, b, [0.1, 0.4, 0.9], sup):
        assert abs(chk.lhs - chk.rhs) <= 1e-10 * max(abs(chk.rhs), 1e-300)


def test_extension_precondition():
    sup = line_support([0.0, 1.0, 2.0])
    with pytest.raises(GeoSparseError):
        # nu = delta_2 is not between mu = delta_0 and nu_tilde = delta_1
        verify_geodesic_extension([1, 0, 0], [0, 0, 1], [0, 1, 0], [0.5], sup)


def test_extension_sweep_200():
    from geosparse.experiments import extension_sweep

    rows = extension_sweep(200, seed=0)
    assert len({r["instance"] for r in rows}) == 200
    for r in rows:
        assert r["lhs"] <= r["rhs"] + 1e-6 * max(abs(r["rhs"]), 1e-300)
        if not r["extended"]:
            assert abs(r["lhs"] - r["rhs"]) <= 1e-10 * max(abs(r["rhs"]), 1e-300)
