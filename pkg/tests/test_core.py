import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geosparse.core import (
    DiscreteMeasure,
    LatentParams,
    LogKernel,
    NumericalBreakdown,
    SeparableKernel,
    SimplexError,
    StabilityError,
    SupportError,
    build_support,
    default_epsilon,
    derive_seed,
    flush_exp,
    grid_support,
    inverse_softmax,
    kernel_matmul,
    log_softmax_rows,
    seeded_rng,
    softmax_rows,
    stack_weights,
    uniform_simplex,
    validate_simplex,
)


class TestBuildSupport:
    def test_two_points_unit_epsilon(self):
        s = build_support([0.0, 1.0], epsilon=1.0)
        np.testing.assert_array_equal(s.cost, [[0, 1], [1, 0]])
        np.testing.assert_allclose(s.kernel, [[1, math.exp(-1)], [math.exp(-1), 1]], rtol=0, atol=1e-16)

    def test_singleton(self):
        s = build_support([[3.0, -1.0]], epsilon=0.7)
        np.testing.assert_array_equal(s.cost, [[0.0]])
        np.testing.assert_array_equal(s.kernel, [[1.0]])

    def test_345_triangle(self):
        s = build_support([(0, 0), (3, 4)], epsilon=25.0)
        assert s.cost[0, 1] == 25.0
        assert s.kernel[0, 1] == pytest.approx(math.exp(-1), rel=1e-15)

    def test_kernel_is_exp_of_cost(self, rng):
        s = build_support(rng.normal(size=(7, 3)), epsilon=0.3)
        assert np.array_equal(s.kernel, np.exp(-s.cost / 0.3))

    def test_ragged_points_rejected(self):
        with pytest.raises(SupportError):
            build_support([[0.0, 1.0], [2.0]], epsilon=1.0)

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_nonpositive_epsilon(self, eps):
        with pytest.raises(SupportError):
            build_support([0.0, 1.0], epsilon=eps)

    def test_underflow_reports_pair(self):
        with pytest.raises(StabilityError, match=r"\(0, 1\)|\(1, 0\)"):
            build_support([0.0, 100.0], epsilon=1e-3)

    def test_default_epsilon(self):
        s = build_support([0.0, 2.0])
        assert s.epsilon == pytest.approx(0.002 * 4.0)
        assert default_epsilon(np.zeros((1, 1))) == 1.0

    def test_arrays_are_read_only(self):
        s = build_support([0.0, 1.0], epsilon=1.0)
        with pytest.raises(ValueError):
            s.cost[0, 0] = 1.0

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 3)),
                  elements=st.floats(-3, 3, allow_nan=False)))
    def test_cost_invariants(self, pts):
        s = build_support(pts, epsilon=50.0)
        assert np.array_equal(s.cost, s.cost.T)
        assert np.all(np.diag(s.cost) == 0)
        assert np.all(s.cost >= 0)
        assert np.all((s.kernel > 0) & (s.kernel <= 1))
        assert np.all(np.diag(s.kernel) == 1)


class TestSeparableKernel:
    @pytest.mark.parametrize("shape", [(5,), (4, 6), (3, 2, 4)])
    def test_matches_dense_within_1e10(self, shape, rng):
        s = grid_support(shape, epsilon=0.2)
        op = s.kernel_op
        assert isinstance(op, SeparableKernel)
        x = rng.random((3, 2, s.size))
        np.testing.assert_allclose(x @ op, x @ s.kernel, rtol=0, atol=1e-10)
        np.testing.assert_allclose(x @ op.T, x @ s.kernel.T, rtol=0, atol=1e-10)
        np.testing.assert_allclose(op.toarray(), s.kernel, rtol=0, atol=1e-10)

    def test_with_epsilon_keeps_grid(self):
        s = grid_support((3, 3), epsilon=0.1).with_epsilon(0.2)
        assert s.axes is not None
        np.testing.assert_allclose(s.kernel_op.toarray(), s.kernel, atol=1e-12)

    def test_scattered_points_use_dense(self, rng):
        s = build_support(rng.normal(size=(4, 2)), epsilon=1.0)
        assert s.kernel_op is s.kernel


def test_kernel_matmul_flattens_batches(rng):
    K = rng.random((7, 5))
    x = rng.random((3, 4, 7))
    np.testing.assert_allclose(kernel_matmul(x, K), x @ K, rtol=1e-14)
    assert kernel_matmul(x[0, 0], K).shape == (5,)
    sep = SeparableKernel((rng.random((3, 3)), rng.random((2, 2))))
    y = rng.random((2, 4, 6))
    np.testing.assert_allclose(kernel_matmul(y, sep), y @ sep.toarray(), rtol=1e-13)


class TestLogKernel:
    def test_selected_past_fast_range(self):
        assert not grid_support((4, 4), 2 / 500).exact_lse
        s = grid_support((4, 4), 2 / 700)
        assert s.exact_lse and isinstance(s.kernel_op, LogKernel)
        d = build_support(s.points, 2 / 700)
        assert isinstance(d.kernel_op, LogKernel) and len(d.kernel_op.log_factors) == 1

    @pytest.mark.parametrize("shape", [(5,), (4, 3), (2, 3, 2)])
    def test_matches_dense_log_product(self, shape, rng):
        s = grid_support(shape, epsilon=0.2)
        op = LogKernel([-((a[:, None] - a[None, :]) ** 2) / 0.2 for a in s.axes])
        np.testing.assert_allclose(op.toarray(), s.kernel, rtol=1e-13)
        x = rng.normal(size=(3, s.size)) * 5
        np.testing.assert_allclose(op.logmatmul(x), np.log(np.exp(x) @ s.kernel), rtol=1e-12)
        np.testing.assert_allclose(op.T.logmatmul(x), np.log(np.exp(x) @ s.kernel.T), rtol=1e-12)

    def test_spread_potentials_keep_dominant_terms(self):
        # row 0's sum is carried by x_0 (kernel 1) although x_1 is 800 nats larger
        op = LogKernel([np.array([[0.0, -900.0], [-900.0, 0.0]])])
        y = op.logmatmul(np.array([0.0, 800.0]))
        np.testing.assert_allclose(y, [np.logaddexp(0.0, -100.0), 800.0], rtol=1e-15, atol=1e-15)

    def test_vjp_matches_finite_differences(self, rng):
        s = grid_support((3, 4), epsilon=0.1)
        op = LogKernel([-((a[:, None] - a[None, :]) ** 2) / 0.1 for a in s.axes]).T
        x = rng.normal(size=(2, 12))
        g = rng.normal(size=(2, 12))
        vjp = op.logmatmul_vjp(x, g)
        h = 1e-6
        for idx in [(0, 0), (1, 5), (0, 11)]:
            dx = np.zeros_like(x)
            dx[idx] = h
            fd = np.sum(g * (op.logmatmul(x + dx) - op.logmatmul(x - dx))) / (2 * h)
            assert vjp[idx] == pytest.approx(fd, rel=1e-6)


def test_flush_exp_zeroes_subnormals():
    z = np.array([0.0, -10.0, -720.0, -1e4])
    e = flush_exp(z)
    assert e[0] == 1.0 and e[1] == math.exp(-10)
    assert np.all(e[2:] == 0.0)


class TestSimplex:
    def test_renormalizes_within_tolerance(self):
        w = validate_simplex([0.5, 0.5 + 5e-10])
        assert w.sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [np.nan, 1.0], []])
    def test_rejects(self, bad):
        with pytest.raises(SimplexError):
            validate_simplex(bad)

    def test_measure_checks_support_size(self):
        s = build_support([0.0, 1.0], epsilon=1.0)
        with pytest.raises(SupportError):
            DiscreteMeasure([0.2, 0.3, 0.5], s)

    def test_measure_is_immutable(self):
        m = DiscreteMeasure([0.25, 0.75])
        with pytest.raises(ValueError):
            m.weights[0] = 1.0

    def test_stack_rejects_mixed_supports(self):
        a = build_support([0.0, 1.0], epsilon=1.0)
        b = build_support([0.0, 2.0], epsilon=1.0)
        with pytest.raises(SupportError):
            stack_weights([DiscreteMeasure([0.5, 0.5], b)], a)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3])

    def test_ratio(self):
        np.testing.assert_allclose(softmax_rows([[0.0, math.log(2)]]), [[1 / 3, 2 / 3]], rtol=1e-15)

    def test_large_logits_against_extended_precision(self):
        out = softmax_rows([[1000.0, 1000.0, 0.0]])
        ref = np.exp(np.array([1000.0, 1000.0, 0.0], dtype=np.longdouble) - 1000)
        ref /= ref.sum()
        np.testing.assert_allclose(out[0], ref.astype(np.float64), rtol=1e-15, atol=1e-300)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            softmax_rows([[0.0, np.nan]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)),
           st.floats(-100, 100))
    def test_rows_on_simplex_and_shift_invariant(self, x, c):
        p = softmax_rows(x)
        validate_simplex(p)
        np.testing.assert_allclose(softmax_rows(x + c), p, rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(np.exp(log_softmax_rows(x)), p, rtol=1e-12, atol=1e-300)

    def test_inverse_softmax_round_trip(self, rng):
        w = uniform_simplex(rng, 4, 5)
        np.testing.assert_allclose(softmax_rows(inverse_softmax(w)), w, rtol=1e-10)


class TestLatentParams:
    def test_rejects_nonfinite(self):
        with pytest.raises(NumericalBreakdown):
            LatentParams(np.array([[np.inf]]), np.zeros((1, 2)))

    def test_maps_to_simplex(self, rng):
        p = LatentParams(rng.normal(size=(3, 2)) * 30, rng.normal(size=(2, 5)) * 30)
        validate_simplex(p.coefficients)
        validate_simplex(p.atoms)


class TestRandomness:
    def test_same_seed_same_draws(self):
        a = uniform_simplex(seeded_rng(7), 10, 4)
        b = uniform_simplex(seeded_rng(7), 10, 4)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert seeded_rng(1).random() != seeded_rng(2).random()

    def test_derived_seeds_are_stable_and_distinct(self):
        assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
        assert len({derive_seed(3, i) for i in range(50)}) == 50

    def test_uniform_simplex_mean(self):
        x = uniform_simplex(seeded_rng(0), 100_000, 3)
        np.testing.assert_allclose(x.mean(axis=0), [1 / 3] * 3, atol=0.01)
        validate_simplex(x)

    def test_gap_sampler_matches_dirichlet_variance(self):
        # uniform on the 3-simplex is Dirichlet(1,1,1): Var = 2 / 36
        x = uniform_simplex(seeded_rng(1), 100_000, 3)
        np.testing.assert_allclose(x.var(axis=0), 2 / 36, atol=2e-3)

    def test_normalized_sampler_is_selectable(self):
        x = uniform_simplex(seeded_rng(0), 1000, 4, method="normalized")
        validate_simplex(x)
        with pytest.raises(ValueError):
            uniform_simplex(seeded_rng(0), 1, 4, method="bogus")
