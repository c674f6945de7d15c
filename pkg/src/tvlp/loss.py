"""Multi-resolution spectral loss.

Per FFT size: centered, reflect-padded frames, raised-cosine window, exact
discrete Fourier transform at the native size (the default sizes are prime,
so zero-padding to a power of two would move the bin centers and is not
done).  The loss is the spectral-convergence term plus the mean absolute
log-magnitude difference, averaged across sizes.  Phase never enters, so
the loss is invariant to a global sign flip of either signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import raised_cosine_window
from .tape import Tape, register_op

__all__ = ["MssConfig", "stft_mag", "mss_loss", "mss_loss_value"]

DEFAULT_FFT_SIZES = (509, 1021, 2053)
LOG_EPS = 1e-8


@dataclass
class MssConfig:
    """FFT sizes with their derived hops and windows."""

    fft_sizes: tuple = DEFAULT_FFT_SIZES
    eps: float = LOG_EPS
    windows: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.fft_sizes = tuple(int(s) for s in self.fft_sizes)
        for size in self.fft_sizes:
            if size < 16:
                raise ValueError("FFT sizes must be >= 16")
            self.windows[size] = raised_cosine_window(size)

    def hop(self, size):
        return -(-size // 4)  # ceil(size / 4)


def _reflect_indices(n, pad):
    return np.pad(np.arange(n), pad, mode="reflect")


def _frame_matrix(padded, size, hop):
    n_frames = 1 + (padded.shape[0] - size) // hop
    starts = np.arange(n_frames) * hop
    return padded[starts[:, None] + np.arange(size)[None, :]]


def _fw_stft_mag(values, ctx, dtype):
    x = values[0]
    size, hop = ctx["size"], ctx["hop"]
    window = ctx["window"]
    if x.shape[0] < size:
        raise ValueError(f"signal of length {x.shape[0]} is shorter than one {size}-sample frame")
    idx = _reflect_indices(x.shape[0], size // 2)
    frames = _frame_matrix(x[idx], size, hop) * window
    spec = np.fft.rfft(frames, axis=1)
    mag = np.abs(spec)
    ctx["idx"] = idx
    ctx["spec"] = spec
    return mag


def _vjp_stft_mag(grad, values, out, ctx):
    x = values[0]
    size, hop = ctx["size"], ctx["hop"]
    window = ctx["window"]
    idx = ctx["idx"]
    spec = ctx["spec"]
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(out > 0, spec / np.where(out > 0, out, 1.0), 0.0)
    g_spec = grad * phase
    g_full = np.zeros((spec.shape[0], size), dtype=np.complex128)
    g_full[:, : spec.shape[1]] = g_spec
    # adjoint of the real-input DFT restricted to the one-sided bins
    g_frames = size * np.fft.ifft(g_full, axis=1).real * window
    grad_padded = np.zeros(idx.shape[0], dtype=np.float64)
    for f in range(g_frames.shape[0]):
        start = f * hop
        grad_padded[start : start + size] += g_frames[f]
    grad_x = np.zeros(x.shape[0], dtype=np.float64)
    np.add.at(grad_x, idx, grad_padded)
    return (grad_x,)


register_op("stft_mag", _fw_stft_mag, _vjp_stft_mag)


def stft_mag(x, size, hop=None, window=None):
    """Magnitude spectrogram (frames x bins), plain-array convenience."""
    x = np.asarray(x, dtype=np.float64)
    if hop is None:
        hop = -(-size // 4)
    if window is None:
        window = raised_cosine_window(size)
    tape = Tape(np.float64)
    return tape.record("stft_mag", tape.leaf(x), size=size, hop=hop, window=window).value


def mss_loss(tape, x_node, y, cfg=None):
    """Build the loss subgraph comparing ``x_node`` against the constant
    target ``y``; returns the scalar loss node."""
    if cfg is None:
        cfg = MssConfig()
    y = np.asarray(y, dtype=np.float64)
    if x_node.value.shape != y.shape:
        raise ValueError(f"signal length {x_node.value.shape} != target length {y.shape}")
    total = None
    for size in cfg.fft_sizes:
        hop = cfg.hop(size)
        window = cfg.windows[size]
        y_mag = stft_mag(y, size, hop, window)
        y_norm = max(float(np.sqrt(np.sum(y_mag * y_mag))), 1e-12)
        y_log = np.log(y_mag + cfg.eps)

        m = tape.record("stft_mag", x_node, size=size, hop=hop, window=window)
        sc = tape.scale(tape.norm2(tape.sub_const(m, y_mag)), 1.0 / y_norm)
        la = tape.mean(tape.abs(tape.sub_const(tape.log(tape.add_const(m, cfg.eps)), y_log)))
        term = tape.add(sc, la)
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / len(cfg.fft_sizes))


def mss_loss_value(x, y, cfg=None):
    """Loss value between two plain arrays (throwaway tape, no gradients)."""
    tape = Tape(np.float64)
    return float(mss_loss(tape, tape.leaf(np.asarray(x, dtype=np.float64)), y, cfg).value)
