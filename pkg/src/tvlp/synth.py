"""Decoder topologies assembling sources and filters.

Two arrangements share all components: the source-filter form runs glottal
pulses plus shaped noise through the all-pole filter, the harmonic-plus-
noise form filters only the pulses and adds the noise after.  A third
renderer swaps the sample-wise filter for the frame-wise overlap-add
approximation (same parameters, different realization).

Raw parameters are unconstrained; gains go through an exponential map,
reflection rows through a squashed tanh, the table position through a
scaled sigmoid.  The fundamental frequency track is frame-rate data, not a
trainable parameter.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, fields

import numpy as np

from . import source
from .params import SQUASH_LIMIT, FramePlan, expected_frame_count
from .tape import Tape

__all__ = [
    "SynthParams",
    "TRAINABLE_FIELDS",
    "init_params",
    "save_params",
    "load_params",
    "resolve_f0",
    "build_synth_graph",
    "sf_synth",
    "hpn_synth",
    "render_framewise",
]

FIR_TAPS = 128
PARAMS_FORMAT = "tvlp-params-v1"

TRAINABLE_FIELDS = (
    "table_pos_raw",
    "voiced_gain_raw",
    "noise_gain_raw",
    "h_gain_raw",
    "noise_logmag",
    "reflection_raw",
    "fir_taps",
)


@dataclass
class SynthParams:
    """Frame-rate vocoder controls plus the trailing FIR.

    All frame-rate tracks share the frame count ``F``.  ``f0_frames`` holds
    Hz values with 0 marking unvoiced frames; it is carried along but never
    optimized.
    """

    mode: str  # "sf" or "hpn"
    hop: int
    f0_frames: np.ndarray  # (F,)
    table_pos_raw: np.ndarray  # (F,)
    voiced_gain_raw: np.ndarray  # (F,)
    noise_gain_raw: np.ndarray  # (F,)
    h_gain_raw: np.ndarray  # (F,)
    noise_logmag: np.ndarray  # (F, 256)
    reflection_raw: np.ndarray  # (F, M)
    fir_taps: np.ndarray  # (128,)

    def __post_init__(self):
        if self.mode not in ("sf", "hpn"):
            raise ValueError(f"mode must be 'sf' or 'hpn', got {self.mode!r}")
        F = self.f0_frames.shape[0]
        for name in ("table_pos_raw", "voiced_gain_raw", "noise_gain_raw", "h_gain_raw"):
            if getattr(self, name).shape != (F,):
                raise ValueError(f"{name} must have shape ({F},)")
        if self.noise_logmag.shape != (F, source.NOISE_BINS):
            raise ValueError(f"noise_logmag must have shape ({F}, {source.NOISE_BINS})")
        if self.reflection_raw.ndim != 2 or self.reflection_raw.shape[0] != F:
            raise ValueError(f"reflection_raw must have shape ({F}, M)")
        if self.fir_taps.shape != (FIR_TAPS,):
            raise ValueError(f"fir_taps must have shape ({FIR_TAPS},)")
        if self.hop < 1:
            raise ValueError("hop must be positive")

    @property
    def frame_count(self):
        return self.f0_frames.shape[0]

    @property
    def order(self):
        return self.reflection_raw.shape[1]

    @property
    def n_samples(self):
        """Natural render length: frame centers tile 0..F*hop-1."""
        return self.frame_count * self.hop

    def trainable(self):
        return {name: getattr(self, name) for name in TRAINABLE_FIELDS}

    def copy(self):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, val in kw.items():
            if isinstance(val, np.ndarray):
                kw[name] = val.copy()
        return SynthParams(**kw)


def init_params(n_frames, order, hop, mode="sf", seed=0, f0_frames=None):
    """Small, stable, near-identity start: reflection raw values ~ N(0, 0.01),
    gains at -20 dB, flat noise magnitudes, unit-impulse FIR."""
    rng = np.random.default_rng(seed)
    if f0_frames is None:
        f0_frames = np.zeros(n_frames)
    gain = np.full(n_frames, np.log(0.1))
    return SynthParams(
        mode=mode,
        hop=hop,
        f0_frames=np.asarray(f0_frames, dtype=np.float64),
        table_pos_raw=np.zeros(n_frames),
        voiced_gain_raw=gain.copy(),
        noise_gain_raw=gain.copy(),
        h_gain_raw=gain.copy(),
        noise_logmag=np.zeros((n_frames, source.NOISE_BINS)),
        reflection_raw=rng.normal(0.0, 0.1, size=(n_frames, order)),
        fir_taps=np.concatenate(([1.0], np.zeros(FIR_TAPS - 1))),
    )


# ---------------------------------------------------------------------------
# serialization: structured text with base64 little-endian float blobs
# ---------------------------------------------------------------------------

def _encode_array(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(obj, key):
    try:
        shape = tuple(obj["shape"])
        raw = base64.b64decode(obj["data"])
        arr = np.frombuffer(raw, dtype=obj["dtype"]).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed parameter file: bad array field {key!r} ({exc})")
    return arr.astype(np.float64)


def save_params(params: SynthParams, path):
    doc = {
        "format": PARAMS_FORMAT,
        "mode": params.mode,
        "hop": params.hop,
        "frames": params.frame_count,
        "order": params.order,
        "arrays": {
            name: _encode_array(getattr(params, name))
            for name in ("f0_frames",) + TRAINABLE_FIELDS
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_params(path) -> SynthParams:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed parameter file: not valid JSON ({exc})")
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"malformed parameter file: bad or missing key 'format'")
    arrays = doc.get("arrays")
    if not isinstance(arrays, dict):
        raise ValueError("malformed parameter file: bad or missing key 'arrays'")
    kw = {}
    for name in ("f0_frames",) + TRAINABLE_FIELDS:
        if name not in arrays:
            raise ValueError(f"malformed parameter file: missing array {name!r}")
        kw[name] = _decode_array(arrays[name], name)
    for key in ("mode", "hop"):
        if key not in doc:
            raise ValueError(f"malformed parameter file: missing key {key!r}")
    return SynthParams(mode=doc["mode"], hop=int(doc["hop"]), **kw)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def resolve_f0(f0_frames, policy="fixed150", seed=0, step=0):
    """Substitute unvoiced (zero) frames with a rendering frequency.

    ``fixed150`` uses 150 Hz (the inference rule); ``uniform`` redraws each
    unvoiced frame from U(50, 500) deterministically per (seed, step).
    """
    f0 = np.array(f0_frames, dtype=np.float64, copy=True)
    unvoiced = f0 <= 0
    if policy == "fixed150":
        f0[unvoiced] = 150.0
    elif policy == "uniform":
        gen = np.random.Generator(np.random.Philox(key=[seed, (step << 16) + 0x5EED]))
        f0[unvoiced] = gen.uniform(50.0, 500.0, size=int(unvoiced.sum()))
    else:
        raise ValueError(f"unknown unvoiced policy {policy!r}")
    return f0


def build_synth_graph(tape: Tape, params: SynthParams, n_out, fs, seed,
                      wavetable=None, f0_render=None, framewise=False,
                      oversample=4, frame_plan=None):
    """Record the full decoder on ``tape``; returns (output node, leaf dict).

    ``f0_render`` must have no unvoiced zeros (see :func:`resolve_f0`); when
    omitted the fixed-150 Hz rule is applied.  ``framewise=True`` swaps the
    sample-wise filter for the frame-wise overlap-add approximation (75%
    overlap by default; ``frame_plan`` overrides it) and is only meaningful
    for source-filter mode.
    """
    if wavetable is None:
        wavetable = source.default_wavetable()
    T = n_out - 1
    F = params.frame_count
    if F != expected_frame_count(T, params.hop):
        raise ValueError(
            f"{F} frames cannot drive {n_out} samples at hop {params.hop} "
            f"(need {expected_frame_count(T, params.hop)})"
        )
    if framewise and params.mode != "sf":
        raise ValueError("frame-wise rendering is defined for source-filter mode only")
    if f0_render is None:
        f0_render = resolve_f0(params.f0_frames)

    leaves = {name: tape.leaf(getattr(params, name)) for name in TRAINABLE_FIELDS}

    k = tape.scale(tape.tanh(leaves["reflection_raw"]), SQUASH_LIMIT)
    a_frames = tape.record("reflection_to_lpc", k)

    pos = tape.scale(tape.sigmoid(leaves["table_pos_raw"]), wavetable.n_tables - 1)
    vgain = tape.exp(leaves["voiced_gain_raw"])
    osc = source.wavetable_osc(tape, wavetable, f0_render, pos, vgain,
                               params.hop, n_out, fs, oversample)

    plan = FramePlan.raised_cosine(params.hop)
    noise_unit = tape.record("shape_noise", leaves["noise_logmag"],
                             n_out=n_out, seed=seed, plan=plan)
    ngain = tape.record("upsample_linear", tape.exp(leaves["noise_gain_raw"]),
                        hop=params.hop, T=T)
    noise = tape.mul(noise_unit, ngain)

    hgain = tape.record("upsample_linear", tape.exp(leaves["h_gain_raw"]),
                        hop=params.hop, T=T)

    if params.mode == "sf":
        excitation = tape.mul(hgain, tape.add(osc, noise))
        if framewise:
            s = tape.record("framewise_lp", excitation, a_frames,
                            plan=plan if frame_plan is None else frame_plan)
        else:
            A = tape.record("upsample_linear", a_frames, hop=params.hop, T=T)
            s = tape.record("lp_tv", excitation, A)
        out = tape.record("global_fir", s, leaves["fir_taps"])
    else:
        A = tape.record("upsample_linear", a_frames, hop=params.hop, T=T)
        s = tape.record("lp_tv", tape.mul(hgain, osc), A)
        out = tape.record("global_fir", tape.add(s, noise), leaves["fir_taps"])
    return out, leaves


def _render(params, n_out, fs, seed, wavetable, dtype, framewise, oversample,
            frame_plan=None):
    tape = Tape(dtype)
    out, _ = build_synth_graph(tape, params, n_out, fs, seed, wavetable,
                               framewise=framewise, oversample=oversample,
                               frame_plan=frame_plan)
    return out.value


def sf_synth(params, n_out, fs, seed=0, wavetable=None, dtype=np.float32,
             oversample=4):
    """Render the source-filter decoder; deterministic for a given seed."""
    if params.mode != "sf":
        raise ValueError("params are not in source-filter mode")
    return _render(params, n_out, fs, seed, wavetable, dtype, False, oversample)


def hpn_synth(params, n_out, fs, seed=0, wavetable=None, dtype=np.float32,
              oversample=4):
    """Render the harmonic-plus-noise decoder."""
    if params.mode != "hpn":
        raise ValueError("params are not in harmonic-plus-noise mode")
    return _render(params, n_out, fs, seed, wavetable, dtype, False, oversample)


def render_framewise(params, n_out, fs, seed=0, wavetable=None, dtype=np.float32,
                     oversample=4, frame_plan=None):
    """Source-filter render with the frame-wise LP approximation."""
    if params.mode != "sf":
        raise ValueError("frame-wise rendering requires source-filter mode")
    return _render(params, n_out, fs, seed, wavetable, dtype, True, oversample,
                   frame_plan)
