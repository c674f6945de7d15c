"""Brute-force references used to validate the LP kernels.

Three independent routes to the same quantities:

* the impulse-response expansion of the time-varying filter, evaluated
  either by enumerating ordered compositions or by literally filtering
  impulses;
* a per-source-sample "unrolled" backward pass that propagates each
  injection site forward through the recursion with no adjoint reuse
  (quadratic cost by construction);
* reverse-mode differentiation of the recursion built sample-by-sample
  on the tape out of scalar ops.

None of these share code with the analytic backward pass in
:mod:`tvlp.lpc`; performance is an explicit non-goal here.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from . import lpc
from .tape import Tape

__all__ = [
    "enumerate_compositions",
    "b_from_compositions",
    "b_by_impulse",
    "naive_backward",
    "tape_unrolled_backward",
    "grad_e_from_iir",
    "finite_difference_gradient",
    "gradcheck_error",
    "random_stable_track",
    "CheckResult",
    "run_check_suite",
]

MAX_EXPANSION_DEPTH = 16  # compositions blow up exponentially past this


@lru_cache(maxsize=None)
def _compositions(d, M):
    if d == 0:
        return ((),)
    out = []
    for i in range(1, min(d, M) + 1):
        for q in _compositions(d - i, M):
            out.append((i,) + q)
    return tuple(out)


def enumerate_compositions(d, M):
    """All ordered compositions of ``d`` into parts in ``1..M``.

    ``d = 0`` yields the single empty composition.
    """
    if d < 0 or M < 1:
        raise ValueError("need d >= 0 and M >= 1")
    return list(_compositions(d, M))


def b_from_compositions(A, d_max):
    """Impulse-response track via the composition sum.

    ``b[t, d-1]`` is the response ``d`` samples after an impulse, evaluated
    as a signed sum over ordered compositions of products of coefficient
    entries at lagged times.  Coefficient references before t=0 are treated
    as zero and entries with ``d > t`` are zeroed (causality); callers should
    restrict comparisons to ``t >= d`` where no such reference occurs.
    """
    A = np.asarray(A, dtype=np.float64)
    T1, M = A.shape
    if d_max > T1 - 1:
        raise ValueError("d_max must not exceed T")
    if d_max > MAX_EXPANSION_DEPTH:
        raise ValueError(f"d_max capped at {MAX_EXPANSION_DEPTH}")
    ts = np.arange(T1)
    b = np.zeros((T1, d_max))
    for d in range(1, d_max + 1):
        acc = np.zeros(T1)
        for q in _compositions(d, M):
            # offsets[j] = q_1 + ... + q_{j-1}; the j-th factor reads A at t - offsets[j]
            offsets = np.concatenate(([0], np.cumsum(q[:-1]))).astype(int)
            term = np.full(T1, (-1.0) ** len(q))
            for j, part in enumerate(q):
                idx = ts - offsets[j]
                valid = idx >= 0
                col = np.zeros(T1)
                col[valid] = A[idx[valid], part - 1]
                term *= col
            acc += term
        b[:, d - 1] = acc
        b[:d, d - 1] = 0.0
    return b


def b_by_impulse(A, d_max):
    """Impulse-response track obtained by filtering shifted unit impulses."""
    A = np.asarray(A, dtype=np.float64)
    T1, _ = A.shape
    if d_max > T1 - 1:
        raise ValueError("d_max must not exceed T")
    b = np.zeros((T1, d_max))
    for tau in range(T1):
        e = np.zeros(T1)
        e[tau] = 1.0
        s = lpc.lp_forward_tv(e, A)
        top = min(d_max, T1 - 1 - tau)
        for d in range(1, top + 1):
            b[tau + d, d - 1] = s[tau + d]
    return b


def grad_e_from_iir(grad_s, b):
    """Excitation adjoint reconstructed from an impulse-response track.

    ``grad_e(t) = grad_s(t) + sum_d b[t+d, d-1] * grad_s(t+d)``.
    """
    grad_s = np.asarray(grad_s, dtype=np.float64)
    T1 = grad_s.shape[0]
    d_max = b.shape[1]
    out = grad_s.copy()
    for t in range(T1):
        for d in range(1, min(d_max, T1 - 1 - t) + 1):
            out[t] += b[t + d, d - 1] * grad_s[t + d]
    return out


# ---------------------------------------------------------------------------
# naive backward passes
# ---------------------------------------------------------------------------

@njit(cache=True)
def _naive_grad_e_kernel(A, grad_s, grad_e):
    # For every injection site tau, re-run the recursion on a unit impulse
    # and gather its downstream contributions.  No reuse across sites.
    T1, M = A.shape
    h = np.empty(T1)
    for tau in range(T1):
        acc = 0.0
        for t in range(tau, T1):
            val = 1.0 if t == tau else 0.0
            imax = min(M, t - tau)
            for i in range(1, imax + 1):
                val -= A[t, i - 1] * h[t - i]
            h[t] = val
            acc += val * grad_s[t]
        grad_e[tau] = acc


def naive_backward(e, A, grad_s):
    """Quadratic-cost reference adjoints for the sample-wise recursion.

    Unrolls the dependence of the output on every excitation sample and
    every coefficient entry explicitly (one impulse propagation per sample),
    instead of sweeping adjoints backwards.  O(T^2 * M) time; small T only.
    """
    e = np.ascontiguousarray(e, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    grad_s = np.ascontiguousarray(grad_s, dtype=np.float64)
    if not (e.shape[0] == A.shape[0] == grad_s.shape[0]):
        raise ValueError("e, A and grad_s must share the same length")
    s = lpc.lp_forward_tv(e, A)
    grad_e = np.empty_like(grad_s)
    _naive_grad_e_kernel(A, grad_s, grad_e)
    # a coefficient entry injects -s(t-i) at time t, so its adjoint is the
    # injection-site gather scaled by that constant
    grad_A = -grad_e[:, None] * lpc.lagged_signal_matrix(s, A.shape[1])
    return grad_e, grad_A


def tape_unrolled_backward(e, A, grad_s):
    """Reverse-mode adjoints from a per-sample scalar-op tape of the recursion.

    Builds ``s(t) = e(t) - sum_i A[t,i] * s(t-i)`` node by node out of
    scalar ``mul``/``sub`` ops and differentiates ``sum_t grad_s[t] s(t)``
    through the generic tape machinery.  Exercises none of the analytic
    kernel path.  Only viable for small T.
    """
    e = np.asarray(e, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    grad_s = np.asarray(grad_s, dtype=np.float64)
    T1, M = A.shape
    tape = Tape(np.float64)
    e_nodes = [tape.leaf(e[t]) for t in range(T1)]
    a_nodes = [[tape.leaf(A[t, i]) for i in range(M)] for t in range(T1)]
    s_nodes = []
    for t in range(T1):
        acc = e_nodes[t]
        for i in range(1, min(M, t) + 1):
            acc = tape.sub(acc, tape.mul(a_nodes[t][i - 1], s_nodes[t - i]))
        s_nodes.append(acc)
    loss = None
    for t in range(T1):
        term = tape.scale(s_nodes[t], grad_s[t])
        loss = term if loss is None else tape.add(loss, term)
    tape.backward(loss)
    grad_e = np.array([float(tape.grad(n)) for n in e_nodes])
    grad_A = np.array([[float(tape.grad(a_nodes[t][i])) for i in range(M)] for t in range(T1)])
    return grad_e, grad_A


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_gradient(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``x`` (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        f_plus = f(x)
        xf[i] = orig - eps
        f_minus = f(x)
        xf[i] = orig
        flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradcheck_error(analytic, numeric):
    """Max elementwise deviation, normalized by the largest gradient entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0),
                np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def random_stable_track(rng, T1, M, n_frames=4):
    """Random reflection-stabilized coefficient track of shape (T1, M).

    Draws a few frames of reflection rows in (-0.9, 0.9), converts them with
    the step-up recursion and linearly interpolates to the sample rate, the
    same parameterization the synthesizer uses.
    """
    from . import params  # local import: params depends on lpc, not on oracle

    n_frames = max(1, min(n_frames, T1))
    if n_frames == 1 or T1 == 1:
        rows = params.reflection_to_lpc(rng.uniform(-0.9, 0.9, size=(1, M)))
        return np.repeat(rows, T1, axis=0)
    hop = max(1, (T1 - 1) // (n_frames - 1))
    n_frames = (T1 - 1) // hop + 1
    k = rng.uniform(-0.9, 0.9, size=(n_frames, M))
    rows = params.reflection_to_lpc(k)
    return params.upsample_linear(rows, hop, T1 - 1)


# ---------------------------------------------------------------------------
# check suite (shared by tests and the gradcheck CLI command)
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self):
        return self.max_err < self.tol


def _loss_for_fd(e, A, w):
    return float(np.dot(w, lpc.lp_forward_tv(e, A)))


def run_check_suite(seed=0, trials=25, coeff_grad_sign=1.0):
    """Randomized validation of the analytic backward passes.

    Returns a list of :class:`CheckResult`.  ``coeff_grad_sign`` scales the
    analytic coefficient adjoints before comparison; it exists solely so the
    suite's sensitivity can be demonstrated (any value other than 1 must make
    it fail).
    """
    rng = np.random.default_rng(seed)
    results = []

    err_naive = err_tape = err_dual = err_iir = err_red = 0.0
    for _ in range(trials):
        T1 = int(rng.integers(2, 33))
        M = int(rng.integers(1, 5))
        A = random_stable_track(rng, T1, M)
        e = rng.standard_normal(T1)
        w = rng.standard_normal(T1)
        s = lpc.lp_forward_tv(e, A)
        ge, gA = lpc.lp_backward_tv(w, A, s)
        gA = coeff_grad_sign * gA

        nge, ngA = naive_backward(e, A, w)
        err_naive = max(err_naive, np.max(np.abs(ge - nge)), np.max(np.abs(gA - ngA)))

        tge, tgA = tape_unrolled_backward(e, A, w)
        err_tape = max(err_tape, np.max(np.abs(ge - tge)), np.max(np.abs(gA - tgA)))

        d_max = min(T1 - 1, 8)
        if d_max >= 1:
            bc = b_from_compositions(A, d_max)
            bi = b_by_impulse(A, d_max)
            err_dual = max(err_dual, np.max(np.abs(bc - bi)))
            err_iir = max(err_iir, np.max(np.abs(grad_e_from_iir(w, b_by_impulse(A, T1 - 1)) - ge)))

        a_row = A[0]
        A_const = np.repeat(a_row[None, :], T1, axis=0)
        s_ti = lpc.lp_forward_ti(e, a_row)
        _, ga_ti = lpc.lp_backward_ti(w, a_row, s_ti)
        _, gA_const = lpc.lp_backward_tv(w, A_const, s_ti)
        err_red = max(err_red, np.max(np.abs(coeff_grad_sign * ga_ti - gA_const.sum(axis=0))))

    results.append(CheckResult("naive unrolled backward vs analytic", err_naive, 1e-12))
    results.append(CheckResult("tape-unrolled backward vs analytic", err_tape, 1e-12))
    results.append(CheckResult("composition vs impulse IIR expansion", err_dual, 1e-12))
    results.append(CheckResult("grad_e reconstructed from IIR track", err_iir, 1e-10))
    results.append(CheckResult("time-invariant single-filter reduction", err_red, 1e-12))

    err_fd = 0.0
    for _ in range(trials):
        T1 = int(rng.integers(2, 33))
        M = int(rng.integers(1, 5))
        A = random_stable_track(rng, T1, M)
        e = rng.standard_normal(T1)
        w = rng.standard_normal(T1)
        s = lpc.lp_forward_tv(e, A)
        ge, gA = lpc.lp_backward_tv(w, A, s)
        fd_e = finite_difference_gradient(lambda x: _loss_for_fd(x, A, w), e)
        fd_A = finite_difference_gradient(lambda B: _loss_for_fd(e, B, w), A)
        err_fd = max(err_fd, gradcheck_error(ge, fd_e),
                     gradcheck_error(coeff_grad_sign * gA, fd_A))
    results.append(CheckResult("finite differences (time-varying)", err_fd, 1e-5))

    # degenerate lengths: T = 0 and T = 1 with order exceeding the length
    err_deg = 0.0
    for T1 in (1, 2):
        A = rng.uniform(-0.4, 0.4, size=(T1, 3))
        e = rng.standard_normal(T1)
        w = rng.standard_normal(T1)
        s = lpc.lp_forward_tv(e, A)
        ge, gA = lpc.lp_backward_tv(w, A, s)
        nge, ngA = naive_backward(e, A, w)
        err_deg = max(err_deg, np.max(np.abs(ge - nge)),
                      np.max(np.abs(coeff_grad_sign * gA - ngA)))
    results.append(CheckResult("degenerate short signals", err_deg, 1e-12))

    return results
