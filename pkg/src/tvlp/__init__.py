"""Differentiable sample-wise time-varying linear prediction toolkit.

Core kernels live in :mod:`tvlp.lpc`, validated against the brute-force
references in :mod:`tvlp.oracle`.  :mod:`tvlp.tape` provides the minimal
reverse-mode engine that chains everything; :mod:`tvlp.synth` assembles the
source-filter and harmonic-plus-noise decoders from :mod:`tvlp.source` and
:mod:`tvlp.params`; :mod:`tvlp.loss` scores renders against targets and
:mod:`tvlp.cli` exposes the command-line workflow.
"""

from . import lpc, loss, oracle, params, source, synth, tape  # noqa: F401
from .lpc import lp_backward_ti, lp_backward_tv, lp_forward_ti, lp_forward_tv, shift_coeffs
from .loss import MssConfig, mss_loss, mss_loss_value, stft_mag
from .params import FramePlan, framewise_lp, lpc_to_spectrum, reflection_to_lpc, upsample_linear
from .source import Wavetable, apply_global_fir, build_lf_wavetable, pulse_train, shape_noise
from .synth import SynthParams, hpn_synth, init_params, render_framewise, sf_synth
from .tape import AdamState, NumericalError, Tape, adam_step, clip_grad_norm

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
    "NumericalError",
    "lp_forward_ti",
    "lp_forward_tv",
    "lp_backward_ti",
    "lp_backward_tv",
    "shift_coeffs",
    "reflection_to_lpc",
    "upsample_linear",
    "framewise_lp",
    "lpc_to_spectrum",
    "FramePlan",
    "Wavetable",
    "build_lf_wavetable",
    "pulse_train",
    "shape_noise",
    "apply_global_fir",
    "SynthParams",
    "init_params",
    "sf_synth",
    "hpn_synth",
    "render_framewise",
    "MssConfig",
    "stft_mag",
    "mss_loss",
    "mss_loss_value",
    "__version__",
]
