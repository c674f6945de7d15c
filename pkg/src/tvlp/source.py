"""Excitation generators and noise shaping.

The voiced source is a wavetable oscillator whose rows are one period of
glottal flow derivative sampled from the transformed LF model on a grid of
Rd shape values (tense to breathy).  Synthesis runs at an oversampled rate
and is decimated with a windowed-sinc lowpass to tame the aliasing caused
by linear table interpolation.

The noise path draws unit Gaussian noise from a counter-based generator and
shapes it frame-wise with linear-phase FIRs built from 256 log-magnitude
bins.  A trainable 128-tap FIR sits at the very end of the decoders.

Differentiable inputs: table position, gains, noise log-magnitudes, FIR
taps.  The fundamental frequency is not differentiable by design; it comes
from an external estimator.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.signal import fftconvolve

from .params import FramePlan, upsample_linear
from .tape import register_op

__all__ = [
    "Wavetable",
    "build_lf_wavetable",
    "default_wavetable",
    "save_wavetable",
    "load_wavetable",
    "oscillator_phase",
    "wavetable_osc",
    "pulse_train",
    "generate_noise",
    "shape_noise",
    "apply_global_fir",
    "design_lowpass",
    "NOISE_BINS",
]

NOISE_BINS = 256
DEFAULT_RD_RANGE = (0.3, 2.7)
DEFAULT_TABLES = 100
DEFAULT_TABLE_LEN = 1024
_WAVETABLE_MAGIC = b"TVLPWT01"


# ---------------------------------------------------------------------------
# transformed LF model
# ---------------------------------------------------------------------------

def _lf_timing(rd):
    """Timing parameters (normalized to a unit period) for a given Rd.

    Uses the standard regression of the waveshape parameters on Rd, then
    recovers the glottal-formant parameter from Rd's defining relation.
    """
    ra = (-1.0 + 4.8 * rd) / 100.0
    rk = (22.4 + 11.8 * rd) / 100.0
    denom = 0.11 * rd / (0.5 + 1.2 * rk) - ra
    if denom <= 0:
        raise ValueError(f"Rd={rd:.3f} outside the supported LF range")
    rg = rk / (4.0 * denom)
    tp = 1.0 / (2.0 * rg)
    te = tp * (1.0 + rk)
    ta = ra
    if not (0.0 < tp < te < 1.0):
        raise ValueError(f"Rd={rd:.3f} gives inconsistent LF timing")
    return tp, te, ta


def _solve_epsilon(ta, ret_len):
    """Return-phase constant eps solving ``eps*ta = 1 - exp(-eps*ret_len)``."""
    eps = 1.0 / ta
    for _ in range(200):
        nxt = (1.0 - np.exp(-eps * ret_len)) / ta
        if abs(nxt - eps) < 1e-13 * max(1.0, abs(eps)):
            return nxt
        eps = nxt
    raise ValueError("return-phase constant iteration did not converge")


def _lf_area(alpha, tp, te, ta, eps):
    """Net flow over one period; the opening-phase growth rate must zero it."""
    wg = np.pi / tp
    s, c = np.sin(wg * te), np.cos(wg * te)
    ea = np.exp(alpha * te)
    open_int = (ea * (alpha * s - wg * c) + wg) / (alpha * alpha + wg * wg)
    e0 = -1.0 / (ea * s)
    ret_len = 1.0 - te
    edl = np.exp(-eps * ret_len)
    ret_int = -(1.0 / (eps * ta)) * ((1.0 - edl) / eps - ret_len * edl)
    return e0 * open_int + ret_int


def _solve_alpha(tp, te, ta, eps, rd):
    lo, hi = -200.0, 400.0
    grid = np.linspace(lo, hi, 241)
    vals = [_lf_area(a, tp, te, ta, eps) for a in grid]
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            return grid[i]
        if vals[i] * vals[i + 1] < 0:
            return brentq(_lf_area, grid[i], grid[i + 1], args=(tp, te, ta, eps),
                          xtol=1e-12, rtol=1e-14)
    raise ValueError(f"LF balance equation has no root in [{lo}, {hi}] for Rd={rd:.3f}")


def lf_flow_derivative(rd, n):
    """One period (n samples) of the LF glottal flow derivative, peak = -1."""
    tp, te, ta = _lf_timing(rd)
    ret_len = 1.0 - te
    eps = _solve_epsilon(ta, ret_len)
    alpha = _solve_alpha(tp, te, ta, eps, rd)
    wg = np.pi / tp
    e0 = -1.0 / (np.exp(alpha * te) * np.sin(wg * te))
    t = np.arange(n) / n
    out = np.where(
        t <= te,
        e0 * np.exp(alpha * t) * np.sin(wg * t),
        -(1.0 / (eps * ta)) * (np.exp(-eps * (t - te)) - np.exp(-eps * (1.0 - te))),
    )
    return out


@dataclass
class Wavetable:
    """Stack of single-period glottal pulses, one row per Rd value."""

    tables: np.ndarray  # (K, L)
    rd_grid: np.ndarray  # (K,) ascending

    @property
    def n_tables(self):
        return self.tables.shape[0]

    @property
    def table_len(self):
        return self.tables.shape[1]


def _bandlimit_rows(rows, keep_fraction):
    """Zero table harmonics above a fraction of the table Nyquist, with a
    half-cosine taper to keep ringing around the closure peak small."""
    if keep_fraction >= 1.0:
        return rows
    L = rows.shape[1]
    spec = np.fft.rfft(rows, axis=1)
    n_bins = spec.shape[1]
    kmax = keep_fraction * (n_bins - 1)
    k0 = 0.8 * kmax
    k = np.arange(n_bins)
    gain = np.ones(n_bins)
    ramp = (k > k0) & (k <= kmax)
    gain[ramp] = 0.5 + 0.5 * np.cos(np.pi * (k[ramp] - k0) / max(kmax - k0, 1e-9))
    gain[k > kmax] = 0.0
    return np.fft.irfft(spec * gain, n=L, axis=1)


def build_lf_wavetable(rd_grid=None, table_len=DEFAULT_TABLE_LEN, bandwidth=0.5):
    """Sample the LF flow derivative over an Rd grid.

    ``bandwidth`` is the retained fraction of the table Nyquist; limiting the
    top harmonics keeps linearly interpolated reads oversample-safe.  Every
    row is DC-removed (net flow returns to baseline) and peak-normalized.
    """
    if rd_grid is None:
        rd_grid = np.linspace(*DEFAULT_RD_RANGE, DEFAULT_TABLES)
    rd_grid = np.asarray(rd_grid, dtype=np.float64)
    if rd_grid.ndim != 1 or np.any(np.diff(rd_grid) <= 0):
        raise ValueError("rd_grid must be 1-d and strictly ascending")
    if rd_grid[0] < DEFAULT_RD_RANGE[0] - 1e-9 or rd_grid[-1] > DEFAULT_RD_RANGE[1] + 1e-9:
        raise ValueError(f"rd_grid must lie within {DEFAULT_RD_RANGE}")
    rows = np.stack([lf_flow_derivative(rd, table_len) for rd in rd_grid])
    rows = _bandlimit_rows(rows, bandwidth)
    rows -= rows.mean(axis=1, keepdims=True)
    rows /= np.max(np.abs(rows), axis=1, keepdims=True)
    return Wavetable(tables=rows, rd_grid=rd_grid)


@lru_cache(maxsize=4)
def default_wavetable(n_tables=DEFAULT_TABLES, table_len=DEFAULT_TABLE_LEN):
    return build_lf_wavetable(np.linspace(*DEFAULT_RD_RANGE, n_tables), table_len)


def save_wavetable(wt, path):
    """Binary cache: magic, K, L (uint32 LE), rd grid (f8), rows (f4)."""
    with open(path, "wb") as fh:
        fh.write(_WAVETABLE_MAGIC)
        fh.write(struct.pack("<II", wt.n_tables, wt.table_len))
        fh.write(wt.rd_grid.astype("<f8").tobytes())
        fh.write(wt.tables.astype("<f4").tobytes())


def load_wavetable(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_WAVETABLE_MAGIC))
        if magic != _WAVETABLE_MAGIC:
            raise ValueError(f"not a wavetable cache file: bad magic {magic!r}")
        k, l = struct.unpack("<II", fh.read(8))
        rd = np.frombuffer(fh.read(8 * k), dtype="<f8")
        tables = np.frombuffer(fh.read(4 * k * l), dtype="<f4").reshape(k, l)
    return Wavetable(tables=tables.astype(np.float64), rd_grid=rd.copy())


# ---------------------------------------------------------------------------
# oscillator
# ---------------------------------------------------------------------------

def design_lowpass(num_taps=127, cutoff=0.45, oversample=4):
    """Windowed-sinc decimation lowpass; ``cutoff`` is relative to the
    output Nyquist, the filter runs at ``oversample`` times the output rate."""
    fc = cutoff / (2.0 * oversample)  # cycles per oversampled sample
    n = np.arange(num_taps) - (num_taps - 1) / 2.0
    h = 2.0 * fc * np.sinc(2.0 * fc * n) * np.blackman(num_taps)
    return h / h.sum()


def oscillator_phase(f0_frames, hop, n_out, fs, oversample):
    """Per-sample table phase in periods (mod 1) at the oversampled rate.

    ``f0_frames`` is the frame-rate track after any unvoiced substitution;
    it is held/interpolated linearly like every other frame-rate control.
    """
    f0_frames = np.asarray(f0_frames, dtype=np.float64)
    if np.any(f0_frames >= fs / 2.0):
        raise ValueError("f0 at or above the output Nyquist frequency")
    if np.any(f0_frames < 0):
        raise ValueError("f0 must be nonnegative")
    n_os = n_out * oversample
    f0 = upsample_linear(f0_frames, hop * oversample, n_os - 1)
    phase = np.cumsum(f0 / (fs * oversample))
    return np.mod(phase, 1.0)


def _fw_wavetable_read(values, ctx, dtype):
    pos = values[0]
    tables = ctx["tables"]
    phase = ctx["phase"]
    K, L = tables.shape
    if pos.shape != phase.shape:
        raise ValueError(f"table position track {pos.shape} must match phase {phase.shape}")
    pos = np.clip(pos, 0.0, K - 1.0)
    r0 = np.floor(pos).astype(np.intp)
    r0 = np.minimum(r0, K - 1)
    r1 = np.minimum(r0 + 1, K - 1)
    wr = pos - r0
    x = phase * L
    i0 = np.floor(x).astype(np.intp) % L
    i1 = (i0 + 1) % L
    wi = x - np.floor(x)
    low = (1.0 - wi) * tables[r0, i0] + wi * tables[r0, i1]
    high = (1.0 - wi) * tables[r1, i0] + wi * tables[r1, i1]
    ctx["row_delta"] = high - low
    return (1.0 - wr) * low + wr * high


def _vjp_wavetable_read(grad, values, out, ctx):
    # linear interpolation across rows: d(out)/d(pos) is the row difference
    return (grad * ctx["row_delta"],)


register_op("wavetable_read", _fw_wavetable_read, _vjp_wavetable_read)


def _fw_decimate(values, ctx, dtype):
    x = values[0]
    taps = ctx["taps"]
    factor = ctx["factor"]
    n_out = ctx["n_out"]
    gd = (len(taps) - 1) // 2
    full = fftconvolve(x, taps, mode="full")
    return full[gd : gd + n_out * factor : factor]


def _vjp_decimate(grad, values, out, ctx):
    x = values[0]
    taps = ctx["taps"]
    factor = ctx["factor"]
    gd = (len(taps) - 1) // 2
    z = np.zeros(x.shape[0] + len(taps) - 1, dtype=grad.dtype)
    z[gd : gd + grad.shape[0] * factor : factor] = grad
    return (fftconvolve(z, taps[::-1], mode="valid"),)


register_op("decimate_fir", _fw_decimate, _vjp_decimate)


def wavetable_osc(tape, wavetable, f0_frames, pos_node, gain_node, hop, n_out, fs,
                  oversample=4):
    """Build the oscillator subgraph; returns the output node (length n_out).

    ``pos_node`` and ``gain_node`` are frame-rate nodes (table position in
    ``[0, K-1]`` and linear gain).  ``f0_frames`` is a plain array; the
    oscillator is deliberately not differentiable with respect to it.
    """
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    phase = oscillator_phase(f0_frames, hop, n_out, fs, oversample)
    pos_track = tape.record("upsample_linear", pos_node, hop=hop * oversample,
                            T=n_out * oversample - 1)
    raw = tape.record("wavetable_read", pos_track, tables=wavetable.tables, phase=phase)
    if oversample > 1:
        taps = design_lowpass(oversample=oversample)
        sig = tape.record("decimate_fir", raw, taps=taps, factor=oversample, n_out=n_out)
    else:
        sig = raw
    gain = tape.record("upsample_linear", gain_node, hop=hop, T=n_out - 1)
    return tape.mul(sig, gain)


# ---------------------------------------------------------------------------
# band-limited pulse train
# ---------------------------------------------------------------------------

def pulse_train(f0, fs):
    """Sum of equal-amplitude cosine harmonics of a common phase accumulator,
    band-limited by construction to the Nyquist frequency.

    ``f0`` is a per-sample track in Hz; zero samples are silent.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 >= fs / 2.0):
        raise ValueError("f0 at or above the Nyquist frequency")
    if np.any(f0 < 0):
        raise ValueError("f0 must be nonnegative")
    theta = 2.0 * np.pi * np.cumsum(f0 / fs)
    voiced = f0 > 0
    n_harm = np.zeros(f0.shape, dtype=np.intp)
    n_harm[voiced] = np.floor((fs / 2.0) / f0[voiced]).astype(np.intp)
    out = np.zeros_like(f0)
    if not np.any(voiced):
        return out
    for k in range(1, int(n_harm.max()) + 1):
        mask = n_harm >= k
        out[mask] += np.cos(k * theta[mask])
    return out


# ---------------------------------------------------------------------------
# shaped noise
# ---------------------------------------------------------------------------

def generate_noise(n, seed):
    """Unit Gaussian noise from a counter-based (Philox) generator."""
    gen = np.random.Generator(np.random.Philox(key=seed))
    return gen.standard_normal(n)


def _fir_from_logmag(logmag):
    """Linear-phase FIR bank (F, 2*(B-1)) from log-magnitude rows (F, B)."""
    B = logmag.shape[1]
    n_fir = 2 * (B - 1)
    mag = np.exp(logmag)
    zero_phase = np.fft.irfft(mag, n=n_fir, axis=1)
    centered = np.roll(zero_phase, B - 1, axis=1)
    window = np.hanning(n_fir)
    return centered * window, mag, window


def _fir_from_logmag_vjp(grad_fir, mag, window):
    B = mag.shape[1]
    n_fir = 2 * (B - 1)
    g_centered = grad_fir * window
    g_zero = np.roll(g_centered, -(B - 1), axis=1)
    spec = np.fft.rfft(g_zero, axis=1).real
    grad_mag = spec / n_fir
    grad_mag[:, 1 : B - 1] *= 2.0
    return grad_mag * mag


def _fw_shape_noise(values, ctx, dtype):
    logmag = values[0]
    if logmag.ndim != 2 or logmag.shape[1] != NOISE_BINS:
        raise ValueError(f"noise filter frames must be (F, {NOISE_BINS})")
    n_out = ctx["n_out"]
    plan: FramePlan = ctx["plan"]
    F = logmag.shape[0]
    from .params import expected_frame_count

    if F != expected_frame_count(n_out - 1, plan.hop):
        raise ValueError(
            f"got {F} noise filter frames but length {n_out} at hop {plan.hop} "
            f"requires {expected_frame_count(n_out - 1, plan.hop)}"
        )
    noise = generate_noise(n_out, ctx["seed"])
    size = plan.frame_size
    delay = NOISE_BINS - 1  # linear-phase FIR center
    fir, mag, window = _fir_from_logmag(np.asarray(logmag, dtype=np.float64))
    segs = []
    out = np.zeros(n_out)
    for row, sig_lo, sig_hi, win_lo, win_hi in plan.iter_frames(n_out, F):
        seg = np.zeros(size)
        seg[win_lo:win_hi] = noise[sig_lo:sig_hi]
        seg *= plan.window
        segs.append(seg)
        y = fftconvolve(seg, fir[row])[delay : delay + size]
        out[sig_lo:sig_hi] += y[win_lo:win_hi]
    ctx["segs"] = segs
    ctx["mag"] = mag
    ctx["win"] = window
    return out / plan.cola_constant()


def _vjp_shape_noise(grad, values, out, ctx):
    logmag = values[0]
    plan: FramePlan = ctx["plan"]
    segs = ctx["segs"]
    F = logmag.shape[0]
    size = plan.frame_size
    delay = NOISE_BINS - 1
    n_fir = 2 * (NOISE_BINS - 1)
    g = np.asarray(grad, dtype=np.float64) / plan.cola_constant()
    n_out = g.shape[0]
    grad_fir = np.zeros((F, n_fir))
    for idx, (row, sig_lo, sig_hi, win_lo, win_hi) in enumerate(plan.iter_frames(n_out, F)):
        gy = np.zeros(size + n_fir - 1)
        gy[delay + win_lo : delay + win_hi] = g[sig_lo:sig_hi]
        grad_fir[row] += fftconvolve(gy, segs[idx][::-1])[size - 1 : size - 1 + n_fir]
    return (_fir_from_logmag_vjp(grad_fir, ctx["mag"], ctx["win"]),)


register_op("shape_noise", _fw_shape_noise, _vjp_shape_noise)


def shape_noise(logmag_frames, n_out, seed, hop):
    """Frame-wise shaped Gaussian noise (plain-array convenience wrapper)."""
    from .tape import Tape

    tape = Tape(np.float64)
    node = tape.record("shape_noise", tape.leaf(logmag_frames), n_out=n_out,
                       seed=seed, plan=FramePlan.raised_cosine(hop))
    return node.value


# ---------------------------------------------------------------------------
# trailing global FIR
# ---------------------------------------------------------------------------

def _fw_global_fir(values, ctx, dtype):
    # direct convolution: a unit-impulse tap vector is then the exact identity
    x, taps = values
    return np.convolve(x, taps, mode="full")[: x.shape[0]]


def _vjp_global_fir(grad, values, out, ctx):
    x, taps = values
    n, m = x.shape[0], taps.shape[0]
    grad_x = fftconvolve(grad, taps[::-1], mode="full")[m - 1 : m - 1 + n]
    grad_taps = fftconvolve(grad, x[::-1], mode="full")[n - 1 : n - 1 + m]
    return grad_x, grad_taps


register_op("global_fir", _fw_global_fir, _vjp_global_fir)


def apply_global_fir(x, taps):
    """Same-length convolution of ``x`` with trainable taps (tail truncated)."""
    x = np.asarray(x)
    taps = np.asarray(taps)
    return np.convolve(x, taps, mode="full")[: x.shape[0]]
