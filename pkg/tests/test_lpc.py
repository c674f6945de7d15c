import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvlp import lpc, oracle


class TestForwardTI:
    def test_one_pole_recursion(self):
        s = lpc.lp_forward_ti(np.array([1.0, 0, 0, 0]), np.array([-0.5]))
        np.testing.assert_allclose(s, [1.0, 0.5, 0.25, 0.125])

    def test_zero_coeffs_identity(self, rng):
        e = rng.standard_normal(16)
        np.testing.assert_array_equal(lpc.lp_forward_ti(e, np.zeros(3)), e)

    def test_zero_input_zero_output(self):
        s = lpc.lp_forward_ti(np.zeros(8), np.array([0.4, -0.2]))
        np.testing.assert_array_equal(s, np.zeros(8))

    def test_unstable_not_rejected(self):
        # blowing up is legitimate; rejection would hide real model behavior
        s = lpc.lp_forward_ti(np.ones(32), np.array([-2.0]))
        assert np.all(np.isfinite(s)) and abs(s[-1]) > 1e8

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            lpc.lp_forward_ti(np.array([1.0, np.nan]), np.array([0.5]))

    def test_initial_state_continuation(self, rng):
        # filtering in two chunks with handed-over state equals one pass
        e = rng.standard_normal(40)
        a = np.array([0.5, -0.3, 0.1])
        full = lpc.lp_forward_ti(e, a)
        s1 = lpc.lp_forward_ti(e[:25], a)
        zi = s1[-1:-4:-1]  # zi[i-1] = s(-i) for the second chunk
        s2 = lpc.lp_forward_ti(e[25:], a, zi=zi)
        np.testing.assert_allclose(np.concatenate([s1, s2]), full, atol=1e-12)


class TestForwardTV:
    def test_hand_recursion(self):
        A = np.array([[0.0], [-1.0], [-0.5]])
        s = lpc.lp_forward_tv(np.ones(3), A)
        np.testing.assert_allclose(s, [1.0, 2.0, 2.0])

    def test_constant_rows_match_time_invariant_to_ulp(self, rng):
        e = rng.standard_normal(64)
        a = np.array([0.4, -0.3, 0.2, 0.1])
        A = np.repeat(a[None, :], 64, axis=0)
        np.testing.assert_array_max_ulp(
            lpc.lp_forward_tv(e, A), lpc.lp_forward_ti(e, a), maxulp=1)

    def test_zero_track_identity(self, rng):
        e = rng.standard_normal(10)
        np.testing.assert_array_equal(lpc.lp_forward_tv(e, np.zeros((10, 2))), e)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="rows"):
            lpc.lp_forward_tv(np.ones(5), np.zeros((4, 1)))

    @given(st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=25, deadline=None)
    def test_linear_in_excitation(self, alpha, beta):
        rng = np.random.default_rng(42)
        e1, e2 = rng.standard_normal(20), rng.standard_normal(20)
        A = rng.uniform(-0.4, 0.4, (20, 3))
        mixed = lpc.lp_forward_tv(alpha * e1 + beta * e2, A)
        parts = alpha * lpc.lp_forward_tv(e1, A) + beta * lpc.lp_forward_tv(e2, A)
        np.testing.assert_allclose(mixed, parts, atol=1e-10)


class TestShiftCoeffs:
    def test_index_shift(self):
        A = np.array([[0.0], [-1.0], [-0.5]])
        np.testing.assert_array_equal(lpc.shift_coeffs(A)[:, 0], [-1.0, -0.5, 0.0])

    def test_constant_track_tapers_columnwise(self):
        A = np.repeat(np.array([[0.3, -0.2, 0.1]]), 6, axis=0)
        Ah = lpc.shift_coeffs(A)
        for i in range(1, 4):
            np.testing.assert_array_equal(Ah[: 6 - i, i - 1], A[: 6 - i, i - 1])
            np.testing.assert_array_equal(Ah[6 - i :, i - 1], 0.0)

    def test_order_exceeding_length(self):
        A = np.ones((2, 5))
        Ah = lpc.shift_coeffs(A)
        for t in range(2):
            for i in range(1, 6):
                assert Ah[t, i - 1] == (1.0 if t + i <= 1 else 0.0)


class TestBackwardTV:
    def test_worked_example(self):
        A = np.array([[0.0], [-1.0], [-0.5]])
        s = lpc.lp_forward_tv(np.ones(3), A)
        grad_e, grad_A = lpc.lp_backward_tv(np.array([0.0, 0.0, 1.0]), A, s)
        np.testing.assert_allclose(grad_e, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(grad_A[:, 0], [0.0, -0.5, -2.0])

    def test_zero_track_reduces_to_products(self, rng):
        grad_s = rng.standard_normal(12)
        s = rng.standard_normal(12)
        A = np.zeros((12, 2))
        grad_e, grad_A = lpc.lp_backward_tv(grad_s, A, s)
        np.testing.assert_array_equal(grad_e, grad_s)
        np.testing.assert_allclose(
            grad_A, -grad_e[:, None] * lpc.lagged_signal_matrix(s, 2))

    def test_zero_adjoint_zero_everything(self, rng):
        A = rng.uniform(-0.4, 0.4, (9, 2))
        s = rng.standard_normal(9)
        grad_e, grad_A = lpc.lp_backward_tv(np.zeros(9), A, s)
        assert not grad_e.any() and not grad_A.any()

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            lpc.lp_backward_tv(np.ones(4), np.zeros((5, 1)), np.ones(5))

    def test_matches_tape_unrolled_reverse_mode(self, rng):
        # analytic backward == reverse-mode over the per-sample scalar graph
        for _ in range(20):
            T1 = int(rng.integers(2, 33))
            M = int(rng.integers(1, 5))
            A = oracle.random_stable_track(rng, T1, M)
            e = rng.standard_normal(T1)
            w = rng.standard_normal(T1)
            s = lpc.lp_forward_tv(e, A)
            ge, gA = lpc.lp_backward_tv(w, A, s)
            tge, tgA = oracle.tape_unrolled_backward(e, A, w)
            np.testing.assert_allclose(ge, tge, atol=1e-12)
            np.testing.assert_allclose(gA, tgA, atol=1e-12)

    def test_gradcheck_with_initial_state(self, rng):
        # zi extends the lag matrix; coefficient adjoints for t < i use it
        T1, M = 12, 3
        A = oracle.random_stable_track(rng, T1, M)
        e = rng.standard_normal(T1)
        zi = rng.standard_normal(M)
        w = rng.standard_normal(T1)
        s = lpc.lp_forward_tv(e, A, zi=zi)
        ge, gA = lpc.lp_backward_tv(w, A, s, zi=zi)
        fd_e = oracle.finite_difference_gradient(
            lambda v: float(np.dot(w, lpc.lp_forward_tv(v, A, zi=zi))), e)
        fd_A = oracle.finite_difference_gradient(
            lambda B: float(np.dot(w, lpc.lp_forward_tv(e, B, zi=zi))), A)
        assert oracle.gradcheck_error(ge, fd_e) < 1e-5
        assert oracle.gradcheck_error(gA, fd_A) < 1e-5


class TestBackwardTI:
    def test_quadratic_coefficient_example(self):
        # L = s(2) = a1^2 for a unit impulse, so dL/da1 = 2 a1 = -1
        a = np.array([-0.5])
        e = np.array([1.0, 0, 0, 0])
        s = lpc.lp_forward_ti(e, a)
        grad_e, grad_a = lpc.lp_backward_ti(np.array([0.0, 0, 1.0, 0]), a, s)
        assert grad_a[0] == pytest.approx(-1.0)
        np.testing.assert_allclose(grad_e, [0.25, 0.5, 1.0, 0.0])

    def test_terminal_adjoint_gives_impulse_response(self, rng):
        a = np.array([0.6, -0.25])
        T1 = 24
        grad_s = np.zeros(T1)
        grad_s[-1] = 1.0
        s = rng.standard_normal(T1)  # grad_e does not depend on s
        grad_e, _ = lpc.lp_backward_ti(grad_s, a, s)
        impulse = np.zeros(T1)
        impulse[0] = 1.0
        h = lpc.lp_forward_ti(impulse, a)
        np.testing.assert_allclose(grad_e, h[::-1], atol=1e-12)
        assert grad_e[-1] == 1.0

    def test_zero_coeffs_passthrough(self, rng):
        grad_s = rng.standard_normal(9)
        grad_e, _ = lpc.lp_backward_ti(grad_s, np.zeros(2), rng.standard_normal(9))
        np.testing.assert_array_equal(grad_e, grad_s)

    def test_single_filter_equals_two_filter_form(self, rng):
        # the direct form: dL/da_i = sum_t grad_s(t) * LP_a(-s(t-i))
        for _ in range(10):
            T1 = int(rng.integers(4, 40))
            M = int(rng.integers(1, 5))
            a = oracle.random_stable_track(rng, 1, M)[0]
            e = rng.standard_normal(T1)
            w = rng.standard_normal(T1)
            s = lpc.lp_forward_ti(e, a)
            _, grad_a = lpc.lp_backward_ti(w, a, s)
            lag = lpc.lagged_signal_matrix(s, M)
            two_filter = np.array(
                [np.dot(w, lpc.lp_forward_ti(-lag[:, i], a)) for i in range(M)])
            np.testing.assert_allclose(grad_a, two_filter, atol=1e-10)

    def test_reduction_to_time_varying_column_sums(self, rng):
        for _ in range(20):
            T1 = int(rng.integers(2, 40))
            M = int(rng.integers(1, 6))
            a = oracle.random_stable_track(rng, 1, M)[0]
            e = rng.standard_normal(T1)
            w = rng.standard_normal(T1)
            s = lpc.lp_forward_ti(e, a)
            _, grad_a = lpc.lp_backward_ti(w, a, s)
            A = np.repeat(a[None, :], T1, axis=0)
            _, grad_A = lpc.lp_backward_tv(w, A, s)
            np.testing.assert_allclose(grad_a, grad_A.sum(axis=0), atol=1e-12)


class TestGradcheck:
    def test_both_backwards_match_finite_differences(self, rng):
        for _ in range(25):
            T1 = int(rng.integers(2, 65))
            M = int(rng.integers(1, 7))
            A = oracle.random_stable_track(rng, T1, M)
            e = rng.standard_normal(T1)
            w = rng.standard_normal(T1)

            s = lpc.lp_forward_tv(e, A)
            ge, gA = lpc.lp_backward_tv(w, A, s)
            fd_e = oracle.finite_difference_gradient(
                lambda v: float(np.dot(w, lpc.lp_forward_tv(v, A))), e)
            fd_A = oracle.finite_difference_gradient(
                lambda B: float(np.dot(w, lpc.lp_forward_tv(e, B))), A)
            assert oracle.gradcheck_error(ge, fd_e) < 1e-5
            assert oracle.gradcheck_error(gA, fd_A) < 1e-5

            a = A[0]
            s_ti = lpc.lp_forward_ti(e, a)
            ge_ti, ga_ti = lpc.lp_backward_ti(w, a, s_ti)
            fd_e = oracle.finite_difference_gradient(
                lambda v: float(np.dot(w, lpc.lp_forward_ti(v, a))), e)
            fd_a = oracle.finite_difference_gradient(
                lambda v: float(np.dot(w, lpc.lp_forward_ti(e, v))), a)
            assert oracle.gradcheck_error(ge_ti, fd_e) < 1e-5
            assert oracle.gradcheck_error(ga_ti, fd_a) < 1e-5

    def test_float32_kernels_run(self, rng):
        e = rng.standard_normal(32).astype(np.float32)
        A = rng.uniform(-0.3, 0.3, (32, 4)).astype(np.float32)
        s = lpc.lp_forward_tv(e, A)
        assert s.dtype == np.float32
        ge, gA = lpc.lp_backward_tv(s.copy(), A, s)
        assert ge.dtype == np.float32 and gA.dtype == np.float32
