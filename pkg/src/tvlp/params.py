"""Differentiable parameterizations feeding the LP kernels.

Covers the reflection-coefficient stabilization (step-up recursion), the
frame-rate to sample-rate linear upsampler, the overlap-add frame-wise LP
approximation, and magnitude envelopes of coefficient rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lpc
from .tape import register_op

__all__ = [
    "SQUASH_LIMIT",
    "squash_reflection",
    "reflection_to_lpc",
    "max_pole_modulus",
    "upsample_linear",
    "expected_frame_count",
    "FramePlan",
    "framewise_lp",
    "lpc_to_spectrum",
    "envelope_db",
    "write_envelope_csv",
]

# raw encoder outputs are squashed into (-1, 1) with a small stability margin
SQUASH_LIMIT = 0.999


def squash_reflection(raw):
    """Map unconstrained values into (-SQUASH_LIMIT, SQUASH_LIMIT)."""
    return SQUASH_LIMIT * np.tanh(np.asarray(raw))


# ---------------------------------------------------------------------------
# step-up recursion
# ---------------------------------------------------------------------------

def _step_up(k):
    """Run the step-up recursion, returning the rows plus the per-stage
    intermediates needed by the backward rule."""
    M = k.shape[-1]
    stages = []
    a = k[..., :1].copy()
    for m in range(2, M + 1):
        stages.append(a)
        km = k[..., m - 1 : m]
        a = np.concatenate([a + km * a[..., ::-1], km], axis=-1)
    return a, stages


def reflection_to_lpc(k):
    """Direct-form coefficient rows from reflection rows, ``|k_i| < 1``.

    The sign convention makes the denominator ``1 + sum_i a_i z^-i``, so the
    rows plug straight into the LP recursion's minus sign.  Any row with an
    entry at or beyond unit magnitude is rejected (it would not be stable).

    Accepts a single row ``(M,)`` or a batch ``(..., M)``.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape[-1] < 1:
        raise ValueError("reflection rows need order >= 1")
    if np.any(np.abs(k) >= 1.0):
        raise ValueError("reflection coefficients must satisfy |k| < 1")
    a, _ = _step_up(k)
    return a


def _reflection_to_lpc_vjp(grad_a, k, stages):
    g = np.array(grad_a, dtype=np.float64, copy=True)
    grad_k = np.zeros_like(k)
    M = k.shape[-1]
    for m in range(M, 1, -1):
        prev = stages[m - 2]
        g_new = g[..., : m - 1]
        grad_k[..., m - 1] = g[..., m - 1] + np.sum(g_new * prev[..., ::-1], axis=-1)
        g = g_new + k[..., m - 1 : m] * g_new[..., ::-1]
    grad_k[..., 0] = g[..., 0]
    return grad_k


def max_pole_modulus(a):
    """Largest pole magnitude of ``1 + sum_i a_i z^-i`` (row or batch)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    worst = 0.0
    for row in a:
        roots = np.roots(np.concatenate(([1.0], row)))
        if roots.size:
            worst = max(worst, float(np.max(np.abs(roots))))
    return worst


# ---------------------------------------------------------------------------
# frame-rate to sample-rate upsampling
# ---------------------------------------------------------------------------

def expected_frame_count(T, hop):
    """Frame count whose centers ``f*hop`` tile ``0..T``."""
    return T // hop + 1


def _upsample_weights(F, hop, T):
    if F != expected_frame_count(T, hop):
        raise ValueError(
            f"got {F} frames but T={T} at hop={hop} requires {expected_frame_count(T, hop)}"
        )
    t = np.arange(T + 1)
    f0 = t // hop
    w = (t - f0 * hop) / float(hop)
    f1 = np.minimum(f0 + 1, F - 1)
    w[f0 == F - 1] = 0.0  # hold past the last frame center
    return f0, f1, w


def upsample_linear(frames, hop, T):
    """Piecewise-linear interpolation of frame-rate controls to samples.

    Frame ``f`` is anchored at sample ``f*hop``; values are held constant
    after the last anchor.  ``frames`` may be ``(F,)`` or ``(F, D)``; the
    output gains a leading time axis of length ``T+1``.
    """
    frames = np.asarray(frames)
    f0, f1, w = _upsample_weights(frames.shape[0], hop, T)
    if frames.ndim == 1:
        return (1.0 - w) * frames[f0] + w * frames[f1]
    wcol = w[:, None]
    return (1.0 - wcol) * frames[f0] + wcol * frames[f1]


def _upsample_linear_vjp(grad_out, F, hop, T):
    f0, f1, w = _upsample_weights(F, hop, T)
    grad_frames = np.zeros((F,) + grad_out.shape[1:], dtype=grad_out.dtype)
    if grad_out.ndim == 1:
        np.add.at(grad_frames, f0, (1.0 - w) * grad_out)
        np.add.at(grad_frames, f1, w * grad_out)
    else:
        wcol = w[:, None]
        np.add.at(grad_frames, f0, (1.0 - wcol) * grad_out)
        np.add.at(grad_frames, f1, wcol * grad_out)
    return grad_frames


# ---------------------------------------------------------------------------
# frame-wise LP with overlap-add
# ---------------------------------------------------------------------------

def raised_cosine_window(n):
    """Periodic raised-cosine window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass
class FramePlan:
    """Windowed framing grid for overlap-add processing."""

    frame_size: int
    hop: int
    window: np.ndarray = field(repr=False)

    @classmethod
    def raised_cosine(cls, hop, overlap=0.75):
        """COLA-exact raised-cosine plan; 75% overlap means size = 4*hop."""
        denom = 1.0 - overlap
        size = hop / denom
        if abs(size - round(size)) > 1e-9:
            raise ValueError(f"hop {hop} and overlap {overlap} give a non-integer frame size")
        size = int(round(size))
        return cls(frame_size=size, hop=hop, window=raised_cosine_window(size))

    @classmethod
    def rectangular(cls, frame_size, hop=None):
        hop = frame_size if hop is None else hop
        return cls(frame_size=frame_size, hop=hop, window=np.ones(frame_size))

    @property
    def overlap(self):
        return 1.0 - self.hop / self.frame_size

    def ola_deviation(self):
        """Max deviation of the summed shifted windows from constant, taken
        over one interior hop period."""
        reps = self.frame_size // self.hop + 2
        acc = np.zeros(self.frame_size + reps * self.hop)
        for f in range(reps):
            acc[f * self.hop : f * self.hop + self.frame_size] += self.window
        interior = acc[self.frame_size : self.frame_size + self.hop]
        return float(np.max(np.abs(interior - np.median(interior))))

    def validate_cola(self, tol=1e-6):
        dev = self.ola_deviation()
        if dev > tol:
            raise ValueError(f"window does not satisfy constant overlap-add; deviation {dev:.3e}")

    def cola_constant(self):
        """The constant value of the summed shifted windows."""
        return float(self.window.sum() / self.hop)

    def n_lead_in(self):
        """Frames starting before sample 0 that still overlap it (their data
        comes from holding the first frame, so the window sum stays constant
        right from the first sample)."""
        return (self.frame_size - 1) // self.hop

    def iter_frames(self, length, n_frames):
        """Yield ``(row, sig_lo, sig_hi, win_lo, win_hi)`` per frame, lead-in
        included; ``row`` is the (held) frame index supplying the data."""
        for f in range(-self.n_lead_in(), n_frames):
            start = f * self.hop
            sig_lo, sig_hi = max(start, 0), min(start + self.frame_size, length)
            if sig_hi <= sig_lo:
                continue
            yield max(f, 0), sig_lo, sig_hi, sig_lo - start, sig_hi - start


def _framewise_forward(e, frames, plan):
    T1 = e.shape[0]
    F = frames.shape[0]
    if F != expected_frame_count(T1 - 1, plan.hop):
        raise ValueError(
            f"got {F} coefficient frames but length {T1} at hop {plan.hop} "
            f"requires {expected_frame_count(T1 - 1, plan.hop)}"
        )
    plan.validate_cola()
    size = plan.frame_size
    out = np.zeros(T1, dtype=e.dtype)
    seg_outputs = []
    window = plan.window.astype(e.dtype)
    for row, sig_lo, sig_hi, win_lo, win_hi in plan.iter_frames(T1, F):
        seg = np.zeros(size, dtype=e.dtype)
        seg[win_lo:win_hi] = e[sig_lo:sig_hi]
        s_f = lpc.lp_forward_ti(seg * window, frames[row])
        seg_outputs.append(s_f)
        out[sig_lo:sig_hi] += s_f[win_lo:win_hi]
    return out / plan.cola_constant(), seg_outputs


def framewise_lp(e, frames, plan):
    """Frame-wise time-invariant LP with overlap-add (the sample-wise
    filter's classic approximation).

    Each windowed frame is filtered from a zero initial state with its own
    coefficient row, and the outputs are overlap-added and divided by the
    overlap-add constant (lead-in frames hold the first row so the window
    sum is constant from the first sample on).  State resets at frame
    boundaries make this differ from the sample-wise filter; the mismatch
    is the point, not a defect.
    """
    e = np.asarray(e)
    frames = np.asarray(frames)
    out, _ = _framewise_forward(e, frames, plan)
    return out


def _framewise_vjp(grad_out, e, frames, plan, seg_outputs):
    T1 = e.shape[0]
    F = frames.shape[0]
    size = plan.frame_size
    g = grad_out / plan.cola_constant()
    grad_e = np.zeros_like(e)
    grad_frames = np.zeros_like(frames)
    window = plan.window.astype(e.dtype)
    for idx, (row, sig_lo, sig_hi, win_lo, win_hi) in enumerate(plan.iter_frames(T1, F)):
        gseg = np.zeros(size, dtype=e.dtype)
        gseg[win_lo:win_hi] = g[sig_lo:sig_hi]
        ge_f, ga_f = lpc.lp_backward_ti(gseg, frames[row], seg_outputs[idx])
        grad_e[sig_lo:sig_hi] += (ge_f * window)[win_lo:win_hi]
        grad_frames[row] += ga_f
    return grad_e, grad_frames


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def lpc_to_spectrum(a, n_freq):
    """Magnitude envelope ``1 / |1 + sum_i a_i e^{-j w i}|`` on ``[0, pi]``.

    ``a`` may be a row ``(M,)`` or a batch ``(F, M)``.  A pole landing on a
    sampled frequency yields ``inf`` at that bin rather than an error.
    """
    if n_freq < 2:
        raise ValueError("n_freq must be >= 2")
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    rows = np.atleast_2d(a)
    M = rows.shape[1]
    w = np.linspace(0.0, np.pi, n_freq)
    basis = np.exp(-1j * np.outer(w, np.arange(1, M + 1)))
    denom = np.abs(1.0 + rows @ basis.T)
    with np.errstate(divide="ignore"):
        env = 1.0 / denom
    return env[0] if single else env


def envelope_db(a, n_freq):
    """Envelope in dB; poles on the grid come out as +inf."""
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(lpc_to_spectrum(a, n_freq))


def write_envelope_csv(path, rows_a, n_freq):
    """Dump per-frame envelopes as ``frame,bin,magnitude_db`` CSV rows."""
    env = envelope_db(np.atleast_2d(rows_a), n_freq)
    with open(path, "w") as fh:
        fh.write("frame,bin,magnitude_db\n")
        for f, row in enumerate(env):
            for b, val in enumerate(row):
                fh.write(f"{f},{b},{val:.6f}\n")


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------

def _fw_reflection(values, ctx, dtype):
    k = values[0]
    if np.any(np.abs(k) >= 1.0):
        raise ValueError("reflection coefficients must satisfy |k| < 1")
    a, stages = _step_up(np.asarray(k, dtype=np.float64))
    ctx["stages"] = stages
    return a


def _vjp_reflection(grad, values, out, ctx):
    return (_reflection_to_lpc_vjp(grad, np.asarray(values[0], dtype=np.float64),
                                   ctx["stages"]),)


register_op("reflection_to_lpc", _fw_reflection, _vjp_reflection)


def _fw_upsample(values, ctx, dtype):
    return upsample_linear(values[0], ctx["hop"], ctx["T"])


def _vjp_upsample(grad, values, out, ctx):
    return (_upsample_linear_vjp(grad, values[0].shape[0], ctx["hop"], ctx["T"]),)


register_op("upsample_linear", _fw_upsample, _vjp_upsample)


def _fw_framewise(values, ctx, dtype):
    e, frames = values
    out, seg_outputs = _framewise_forward(e, frames, ctx["plan"])
    ctx["seg_outputs"] = seg_outputs
    return out


def _vjp_framewise(grad, values, out, ctx):
    e, frames = values
    return _framewise_vjp(grad, e, frames, ctx["plan"], ctx["seg_outputs"])


register_op("framewise_lp", _fw_framewise, _vjp_framewise)
