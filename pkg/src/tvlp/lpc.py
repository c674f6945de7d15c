"""Sample-wise all-pole filtering with analytic forward and backward passes.

The synthesis recursion is

    s(t) = e(t) - sum_{i=1..M} a_i(t) * s(t-i),        s(t) = 0 for t < 0,

with per-sample coefficient rows ``A[t] = [a_1(t), ..., a_M(t)]`` (the
time-invariant case is the constant-row special case).  The backward pass
reuses the *same* recursion kernel: the excitation adjoint is obtained by
filtering the time-reversed output adjoint with the time-reversed,
index-shifted coefficient track ``A_hat[t, i] = A[t+i, i]``, and the
coefficient adjoints follow as ``-grad_e(t) * s(t-i)``.  Both passes are
O(T*M) with the time loop strictly sequential.

Coefficients are stored time-major so the inner loop over the order is
contiguous.  Kernels are numba-compiled and specialize on dtype (float32
for production synthesis, float64 for gradient checking).
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .tape import register_op

__all__ = [
    "lp_forward_ti",
    "lp_forward_tv",
    "lp_backward_ti",
    "lp_backward_tv",
    "shift_coeffs",
    "lagged_signal_matrix",
]


@njit(cache=True)
def _lp_kernel_tv(e, A, zi, out):
    # out(t) = e(t) - sum_i A[t, i-1] * out(t-i); out(-i) supplied by zi[i-1].
    T1, M = A.shape
    for t in range(T1):
        acc = e[t]
        imax = min(M, t)
        for i in range(1, imax + 1):
            acc -= A[t, i - 1] * out[t - i]
        for i in range(imax + 1, M + 1):
            acc -= A[t, i - 1] * zi[i - t - 1]
        out[t] = acc


@njit(cache=True)
def _lp_kernel_ti(e, a, zi, out):
    T1 = e.shape[0]
    M = a.shape[0]
    for t in range(T1):
        acc = e[t]
        imax = min(M, t)
        for i in range(1, imax + 1):
            acc -= a[i - 1] * out[t - i]
        for i in range(imax + 1, M + 1):
            acc -= a[i - 1] * zi[i - t - 1]
        out[t] = acc


def _check_signal(x, name):
    x = np.ascontiguousarray(x)
    if x.ndim != 1 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a 1-d signal of length >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _check_zi(zi, M, dtype):
    if zi is None:
        return np.zeros(M, dtype=dtype)
    zi = np.ascontiguousarray(zi, dtype=dtype)
    if zi.shape != (M,):
        raise ValueError(f"zi must have shape ({M},), got {zi.shape}")
    return zi


def lp_forward_ti(e, a, zi=None):
    """Time-invariant all-pole filter: ``s(t) = e(t) - sum_i a[i-1] s(t-i)``.

    ``zi[i-1]`` supplies ``s(-i)`` (zeros by default).  Unstable ``a`` is not
    rejected; overflow is a legitimate outcome of an unstable filter.
    """
    e = _check_signal(e, "e")
    a = np.ascontiguousarray(a)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ValueError("a must be a 1-d coefficient row of order >= 1")
    if not np.all(np.isfinite(a)):
        raise ValueError("a contains non-finite values")
    a = a.astype(e.dtype, copy=False)
    zi = _check_zi(zi, a.shape[0], e.dtype)
    out = np.empty_like(e)
    _lp_kernel_ti(e, a, zi, out)
    return out


def lp_forward_tv(e, A, zi=None):
    """Sample-wise all-pole filter: ``s(t) = e(t) - sum_i A[t, i-1] s(t-i)``."""
    e = _check_signal(e, "e")
    A = np.ascontiguousarray(A)
    if A.ndim != 2:
        raise ValueError("A must be a (T+1, M) coefficient track")
    if A.shape[0] != e.shape[0]:
        raise ValueError(
            f"coefficient track has {A.shape[0]} rows but the signal has {e.shape[0]} samples"
        )
    if not np.all(np.isfinite(A)):
        raise ValueError("A contains non-finite values")
    A = A.astype(e.dtype, copy=False)
    zi = _check_zi(zi, A.shape[1], e.dtype)
    out = np.empty_like(e)
    _lp_kernel_tv(e, A, zi, out)
    return out


def shift_coeffs(A):
    """Index-shifted track ``A_hat[t, i-1] = A[t+i, i-1]``, zero past the end.

    Entries with ``t+i > T`` multiply adjoints of samples beyond the signal,
    which are identically zero, so zero padding makes the backward recursion
    exact at the boundary.
    """
    A = np.asarray(A)
    if A.ndim != 2:
        raise ValueError("A must be a (T+1, M) coefficient track")
    T1, M = A.shape
    out = np.zeros_like(A)
    for i in range(1, M + 1):
        if i < T1:
            out[: T1 - i, i - 1] = A[i:, i - 1]
    return out


def lagged_signal_matrix(s, M, zi=None):
    """Matrix ``L[t, i-1] = s(t-i)`` with ``s(-i)`` from ``zi`` (else zero)."""
    s = np.asarray(s)
    T1 = s.shape[0]
    out = np.zeros((T1, M), dtype=s.dtype)
    for i in range(1, M + 1):
        if i < T1:
            out[i:, i - 1] = s[:-i]
        if zi is not None:
            for t in range(min(i, T1)):
                out[t, i - 1] = zi[i - t - 1]
    return out


def lp_backward_tv(grad_s, A, s, zi=None):
    """Adjoints of :func:`lp_forward_tv` given the saved forward output ``s``.

    Returns ``(grad_e, grad_A)`` where ``grad_e`` results from running the
    forward recursion kernel over the time-reversed ``grad_s`` with the
    time-reversed shifted track, and ``grad_A[t, i-1] = -grad_e(t) * s(t-i)``.
    ``zi`` is only used to fill the ``s(t-i)`` references for ``t < i``;
    gradients with respect to the initial state itself are not computed.
    """
    grad_s = np.ascontiguousarray(grad_s)
    A = np.asarray(A)
    s = np.asarray(s)
    if not (grad_s.shape[0] == A.shape[0] == s.shape[0]):
        raise ValueError("grad_s, A and s must share the same length")
    A_hat = shift_coeffs(A)
    rev = np.ascontiguousarray(grad_s[::-1])
    rev_track = np.ascontiguousarray(A_hat[::-1])
    grad_e = np.empty_like(rev)
    _lp_kernel_tv(rev, rev_track, np.zeros(A.shape[1], dtype=rev.dtype), grad_e)
    grad_e = np.ascontiguousarray(grad_e[::-1])
    grad_A = -grad_e[:, None] * lagged_signal_matrix(s, A.shape[1], zi)
    return grad_e, grad_A


def lp_backward_ti(grad_s, a, s, zi=None):
    """Adjoints of :func:`lp_forward_ti`; one filter run plus a lag reduction.

    ``grad_a[i-1] = -sum_t grad_e(t) * s(t-i)``.  By construction this equals
    the time-sum of the time-varying coefficient adjoints under a constant
    track (tested, not assumed).
    """
    grad_s = np.ascontiguousarray(grad_s)
    a = np.asarray(a)
    s = np.asarray(s)
    if grad_s.shape[0] != s.shape[0]:
        raise ValueError("grad_s and s must share the same length")
    rev = np.ascontiguousarray(grad_s[::-1])
    grad_e = np.empty_like(rev)
    a_c = np.ascontiguousarray(a, dtype=rev.dtype)
    _lp_kernel_ti(rev, a_c, np.zeros(a.shape[0], dtype=rev.dtype), grad_e)
    grad_e = np.ascontiguousarray(grad_e[::-1])
    lag = lagged_signal_matrix(s, a.shape[0], zi)
    grad_a = -(lag * grad_e[:, None]).sum(axis=0)
    return grad_e, grad_a


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------

def _fw_lp_tv(values, ctx, dtype):
    e, A = values
    return lp_forward_tv(e, A, ctx.get("zi"))


def _vjp_lp_tv(grad, values, out, ctx):
    _, A = values
    return lp_backward_tv(grad, A, out, ctx.get("zi"))


def _fw_lp_ti(values, ctx, dtype):
    e, a = values
    return lp_forward_ti(e, a, ctx.get("zi"))


def _vjp_lp_ti(grad, values, out, ctx):
    _, a = values
    return lp_backward_ti(grad, a, out, ctx.get("zi"))


register_op("lp_tv", _fw_lp_tv, _vjp_lp_tv)
register_op("lp_ti", _fw_lp_ti, _vjp_lp_ti)
