import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvlp import lpc, oracle


class TestCompositions:
    def test_single_part(self):
        assert oracle.enumerate_compositions(1, 5) == [(1,)]

    def test_parts_capped_by_order(self):
        assert oracle.enumerate_compositions(2, 1) == [(1, 1)]

    def test_hand_enumeration_d3_m2(self):
        got = set(oracle.enumerate_compositions(3, 2))
        assert got == {(1, 1, 1), (1, 2), (2, 1)}

    def test_empty_composition_at_zero(self):
        assert oracle.enumerate_compositions(0, 3) == [()]

    @given(st.integers(1, 12))
    @settings(max_examples=12, deadline=None)
    def test_unrestricted_count_is_power_of_two(self, d):
        # ordered compositions of d number 2^(d-1) once parts are unrestricted
        assert len(oracle.enumerate_compositions(d, d)) == 2 ** (d - 1)

    def test_every_composition_sums_to_d(self):
        for q in oracle.enumerate_compositions(7, 3):
            assert sum(q) == 7 and all(1 <= p <= 3 for p in q)

    def test_invalid_arguments_rejected(self):
        with pytest.raises(ValueError):
            oracle.enumerate_compositions(-1, 2)
        with pytest.raises(ValueError):
            oracle.enumerate_compositions(2, 0)


class TestIirExpansion:
    def test_constant_one_pole_powers(self):
        A = np.full((12, 1), -0.5)
        b = oracle.b_from_compositions(A, 6)
        for d in range(1, 7):
            np.testing.assert_allclose(b[d:, d - 1], 0.5 ** d)

    def test_zero_track_zero_expansion(self):
        assert not oracle.b_from_compositions(np.zeros((8, 2)), 4).any()

    def test_first_column_is_negated_coefficient(self, rng):
        A = rng.uniform(-0.5, 0.5, (10, 3))
        b = oracle.b_from_compositions(A, 1)
        np.testing.assert_array_equal(b[1:, 0], -A[1:, 0])

    def test_causality_zeros(self, rng):
        A = rng.uniform(-0.5, 0.5, (10, 2))
        b = oracle.b_from_compositions(A, 6)
        for d in range(1, 7):
            assert not b[:d, d - 1].any()

    def test_depth_cap(self):
        with pytest.raises(ValueError, match="capped"):
            oracle.b_from_compositions(np.zeros((40, 1)), 17)

    def test_dual_oracle_identity(self, rng):
        for _ in range(15):
            T1 = int(rng.integers(4, 17))
            M = int(rng.integers(1, 4))
            A = oracle.random_stable_track(rng, T1, M)
            d_max = min(T1 - 1, 8)
            bc = oracle.b_from_compositions(A, d_max)
            bi = oracle.b_by_impulse(A, d_max)
            np.testing.assert_allclose(bc, bi, atol=1e-12)

    def test_impulse_time_invariant_rows_constant(self):
        a = np.array([0.4, -0.2])
        A = np.repeat(a[None, :], 14, axis=0)
        b = oracle.b_by_impulse(A, 5)
        for d in range(1, 6):
            col = b[d:, d - 1]
            np.testing.assert_allclose(col, col[0], atol=1e-14)

    def test_impulse_leading_response_is_one(self, rng):
        A = rng.uniform(-0.4, 0.4, (9, 2))
        for tau in range(9):
            e = np.zeros(9)
            e[tau] = 1.0
            assert lpc.lp_forward_tv(e, A)[tau] == 1.0

    def test_grad_e_reconstruction_matches_analytic(self, rng):
        for _ in range(10):
            T1 = int(rng.integers(3, 17))
            M = int(rng.integers(1, 4))
            A = oracle.random_stable_track(rng, T1, M)
            w = rng.standard_normal(T1)
            s = lpc.lp_forward_tv(rng.standard_normal(T1), A)
            ge, _ = lpc.lp_backward_tv(w, A, s)
            b = oracle.b_by_impulse(A, T1 - 1)
            np.testing.assert_allclose(oracle.grad_e_from_iir(w, b), ge, atol=1e-10)


class TestNaiveBackward:
    def test_worked_example(self):
        A = np.array([[0.0], [-1.0], [-0.5]])
        ge, gA = oracle.naive_backward(np.ones(3), A, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(ge, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(gA[:, 0], [0.0, -0.5, -2.0])

    def test_matches_finite_differences(self, rng):
        T1, M = 14, 2
        A = oracle.random_stable_track(rng, T1, M)
        e = rng.standard_normal(T1)
        w = rng.standard_normal(T1)
        ge, gA = oracle.naive_backward(e, A, w)
        fd_e = oracle.finite_difference_gradient(
            lambda v: float(np.dot(w, lpc.lp_forward_tv(v, A))), e)
        fd_A = oracle.finite_difference_gradient(
            lambda B: float(np.dot(w, lpc.lp_forward_tv(e, B))), A)
        assert oracle.gradcheck_error(ge, fd_e) < 1e-5
        assert oracle.gradcheck_error(gA, fd_A) < 1e-5

    def test_zero_adjoint(self, rng):
        A = rng.uniform(-0.4, 0.4, (7, 2))
        ge, gA = oracle.naive_backward(rng.standard_normal(7), A, np.zeros(7))
        assert not ge.any() and not gA.any()

    def test_agrees_with_analytic_elementwise(self, rng):
        for _ in range(25):
            T1 = int(rng.integers(2, 33))
            M = int(rng.integers(1, 5))
            A = oracle.random_stable_track(rng, T1, M)
            e = rng.standard_normal(T1)
            w = rng.standard_normal(T1)
            s = lpc.lp_forward_tv(e, A)
            ge, gA = lpc.lp_backward_tv(w, A, s)
            nge, ngA = oracle.naive_backward(e, A, w)
            np.testing.assert_allclose(ge, nge, atol=1e-12)
            np.testing.assert_allclose(gA, ngA, atol=1e-12)


class TestFiniteDifferenceTools:
    def test_gradient_of_quadratic(self):
        grad = oracle.finite_difference_gradient(
            lambda v: float(np.sum(v * v)), np.array([1.0, -2.0, 3.0]))
        np.testing.assert_allclose(grad, [2.0, -4.0, 6.0], atol=1e-8)

    def test_error_metric_scales(self):
        assert oracle.gradcheck_error(np.array([1.0]), np.array([1.0])) == 0.0
        assert oracle.gradcheck_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


class TestCheckSuite:
    def test_default_suite_passes(self):
        results = oracle.run_check_suite(seed=0, trials=8)
        assert all(r.passed for r in results)

    def test_sign_bug_detected(self):
        results = oracle.run_check_suite(seed=0, trials=4, coeff_grad_sign=-1.0)
        assert any(not r.passed for r in results)

    def test_degenerate_lengths_covered(self):
        names = [r.name for r in oracle.run_check_suite(seed=1, trials=2)]
        assert any("degenerate" in n for n in names)
