"""Command-line interface: synthesis, fitting, validation, benchmarks, export.

Commands
--------
synth      render a parameter file to WAV
fit        analysis-by-synthesis parameter fitting against a target WAV
gradcheck  randomized validation suite for the analytic gradients
bench      wall-time comparison of the analytic and naive backward passes
spectra    dump per-frame LP envelopes as CSV

Exit codes: 0 success, 2 I/O failure, 3 validation failure, 4 numerical
failure.  ``TVLP_SEED`` provides the seed when neither flag nor config file
sets one.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, asdict, fields, replace

import numpy as np
import scipy.io.wavfile
from scipy.signal import resample_poly

from . import oracle, source, synth
from .loss import DEFAULT_FFT_SIZES, MssConfig, mss_loss, mss_loss_value
from .params import expected_frame_count, reflection_to_lpc, squash_reflection, write_envelope_csv
from .synth import (SynthParams, TRAINABLE_FIELDS, build_synth_graph, init_params,
                    load_params, resolve_f0, save_params)
from .tape import AdamState, NumericalError, Tape, adam_step, clip_grad_norm

log = logging.getLogger("tvlp")

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# audio and track I/O
# ---------------------------------------------------------------------------

def read_wav(path, target_fs=None):
    """Load a WAV file as a mono float64 signal in [-1, 1].

    Multichannel input is averaged; a mismatched rate is resampled, both
    with a warning.
    """
    fs, data = scipy.io.wavfile.read(path)
    if data.dtype == np.int16:
        x = data / 32767.0  # symmetric with write_wav's pcm16 scaling
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if x.ndim == 2:
        log.warning("averaging %d channels to mono", x.shape[1])
        x = x.mean(axis=1)
    if target_fs is not None and fs != target_fs:
        log.warning("resampling %d Hz -> %d Hz", fs, target_fs)
        x = resample_poly(x, target_fs, fs)
        fs = target_fs
    return x, fs


def write_wav(path, x, fs, encoding="float32"):
    """Write mono audio as 32-bit float or 16-bit PCM."""
    x = np.asarray(x)
    if encoding == "float32":
        scipy.io.wavfile.write(path, fs, x.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(x, -1.0, 1.0)
        scipy.io.wavfile.write(path, fs, np.round(clipped * 32767.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")


def read_f0_csv(path):
    """Read ``time_seconds,f0_hz`` rows (0 Hz meaning unvoiced)."""
    times, values = [], []
    with open(path) as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                t, v = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if not times:  # tolerate a header line
                    continue
                raise ValueError(f"malformed f0 CSV row: {row!r}")
            times.append(t)
            values.append(v)
    if not times:
        raise ValueError("f0 CSV contains no data rows")
    order = np.argsort(times)
    return np.asarray(times)[order], np.asarray(values)[order]


def f0_track_to_frames(times, values, n_frames, hop, fs):
    """Sample an (irregular) f0 track at the frame centers, nearest-neighbor
    so voiced/unvoiced zeros survive untouched."""
    frame_times = np.arange(n_frames) * hop / fs
    idx = np.searchsorted(times, frame_times)
    idx = np.clip(idx, 0, len(times) - 1)
    left = np.clip(idx - 1, 0, len(times) - 1)
    pick_left = np.abs(times[left] - frame_times) <= np.abs(times[idx] - frame_times)
    return values[np.where(pick_left, left, idx)]


def write_f0_csv(path, f0_frames, hop, fs):
    with open(path, "w") as fh:
        fh.write("time_seconds,f0_hz\n")
        for f, v in enumerate(np.asarray(f0_frames)):
            fh.write(f"{f * hop / fs:.6f},{v:.3f}\n")


def _params_file_fs(path, default=24000):
    with open(path) as fh:
        return int(json.load(fh).get("fs", default))


# ---------------------------------------------------------------------------
# fit configuration
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    mode: str = "sf"  # sf | hpn | framewise
    steps: int = 2000
    lr: float = 1e-4
    clip_norm: float = 0.5
    order: int = 22
    hop: int = 240
    fs: int = 24000
    seed: int = 0
    unvoiced: str = "fixed150"  # fixed150 | uniform
    max_seconds: float = 2.0
    fft_sizes: tuple = DEFAULT_FFT_SIZES

    def validate(self):
        if self.mode not in ("sf", "hpn", "framewise"):
            raise ValueError(f"mode must be sf, hpn or framewise, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("lr", "clip_norm", "hop", "fs", "max_seconds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.unvoiced not in ("fixed150", "uniform"):
            raise ValueError(f"unvoiced policy must be fixed150 or uniform, got {self.unvoiced!r}")
        return self


def load_fit_config(config_path=None, overrides=None, env=None):
    """Config file < command-line flags; seed falls back to ``TVLP_SEED``."""
    env = os.environ if env is None else env
    cfg = FitConfig()
    if config_path is not None:
        with open(config_path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed config file: {exc}")
        known = {f.name for f in fields(FitConfig)}
        for key, val in doc.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key == "fft_sizes":
                val = tuple(val)
            cfg = replace(cfg, **{key: val})
        seed_from_file = "seed" in (doc or {})
    else:
        seed_from_file = False
    seed_set = seed_from_file
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key == "seed":
                seed_set = True
            cfg = replace(cfg, **{key: val})
    if not seed_set and "TVLP_SEED" in env:
        cfg = replace(cfg, seed=int(env["TVLP_SEED"]))
    return cfg.validate()


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    losses: list
    best_step: int
    best_loss: float
    rescored_loss: float
    params: SynthParams
    aborted: bool
    seconds: float


def _score(params, target, cfg, seed_step, wavetable, mss_cfg):
    f0r = resolve_f0(params.f0_frames, cfg.unvoiced, cfg.seed, seed_step)
    tape = Tape(np.float64)
    out, _ = build_synth_graph(tape, params, len(target), cfg.fs, cfg.seed,
                               wavetable, f0_render=f0r,
                               framewise=cfg.mode == "framewise")
    return float(mss_loss(tape, out, target, mss_cfg).value)


def run_fit(target, f0_frames, cfg: FitConfig, wavetable=None, progress=None):
    """Adam with gradient clipping on the spectral loss; returns the
    best-loss parameters and the per-step loss curve."""
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("target signal is empty")
    n_out = target.shape[0]
    if wavetable is None:
        wavetable = source.default_wavetable()
    n_frames = expected_frame_count(n_out - 1, cfg.hop)
    if len(f0_frames) != n_frames:
        raise ValueError(f"f0 track has {len(f0_frames)} frames, need {n_frames}")
    mode = "sf" if cfg.mode in ("sf", "framewise") else "hpn"
    params = init_params(n_frames, cfg.order, cfg.hop, mode=mode, seed=cfg.seed,
                         f0_frames=f0_frames)
    arrays = [getattr(params, name) for name in TRAINABLE_FIELDS]
    state = AdamState.init(arrays, lr=cfg.lr)
    mss_cfg = MssConfig(cfg.fft_sizes)

    losses = []
    best_loss, best_params, best_step = np.inf, None, -1
    aborted = False
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        f0r = resolve_f0(params.f0_frames, cfg.unvoiced, cfg.seed, step)
        tape = Tape(np.float64)
        out, leaves = build_synth_graph(tape, params, n_out, cfg.fs, cfg.seed,
                                        wavetable, f0_render=f0r,
                                        framewise=cfg.mode == "framewise")
        loss_node = mss_loss(tape, out, target, mss_cfg)
        loss = float(loss_node.value)
        losses.append(loss)
        if not np.isfinite(loss):
            log.error("loss became non-finite at step %d; keeping last good checkpoint", step)
            aborted = True
            break
        if loss < best_loss:
            best_loss, best_params, best_step = loss, params.copy(), step
        tape.backward(loss_node)
        grads = [tape.grad(leaves[name]) for name in TRAINABLE_FIELDS]
        try:
            clip_grad_norm(grads, cfg.clip_norm)
        except NumericalError:
            log.error("non-finite gradients at step %d; keeping last good checkpoint", step)
            aborted = True
            break
        adam_step(arrays, grads, state)
        if progress and (step + 1) % progress == 0:
            log.info("step %d/%d loss %.6f", step + 1, cfg.steps, loss)
    seconds = time.perf_counter() - t0
    if best_params is None:
        raise NumericalError("fit never produced a finite loss")
    rescored = _score(best_params, target, cfg, best_step, wavetable, mss_cfg)
    return FitResult(losses=losses, best_step=best_step, best_loss=best_loss,
                     rescored_loss=rescored, params=best_params, aborted=aborted,
                     seconds=seconds)


def _fingerprint():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(T, M, repeats=5, seed=0):
    """Median wall times for the analytic and the naive backward pass at
    length T and 2T.  Returns a list of row dicts.

    The coefficient track is a random stable row held constant over time:
    the kernels' cost is data-independent, and bounded values keep inf and
    denormal handling out of the timings.
    """
    if T < 1024:
        raise ValueError("bench requires T >= 1024")
    from . import lpc

    rng = np.random.default_rng(seed)
    rows = []
    for n in (T, 2 * T):
        A = oracle.random_stable_track(rng, n, M, n_frames=1)
        e = rng.standard_normal(n)
        grad_s = rng.standard_normal(n)
        s = lpc.lp_forward_tv(e, A)
        lpc.lp_backward_tv(grad_s, A, s)  # warm the jit before timing
        t_analytic = _median_time(lambda: lpc.lp_backward_tv(grad_s, A, s), repeats)
        rows.append({"kernel": "analytic", "T": n, "M": M, "median_s": t_analytic})
        oracle.naive_backward(e[:2048], A[:2048], grad_s[:2048])  # warm
        t_naive = _median_time(lambda: oracle.naive_backward(e, A, grad_s), max(1, repeats // 2))
        rows.append({"kernel": "naive", "T": n, "M": M, "median_s": t_naive})
    return rows


def bench_summary(rows):
    by = {(r["kernel"], r["T"]): r["median_s"] for r in rows}
    ts = sorted({r["T"] for r in rows})
    base, dbl = ts[0], ts[-1]
    return {
        "ratio_naive_over_analytic": by[("naive", base)] / by[("analytic", base)],
        "analytic_doubling_ratio": by[("analytic", dbl)] / by[("analytic", base)],
        "naive_doubling_ratio": by[("naive", dbl)] / by[("naive", base)],
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    params = load_params(args.params)
    fs = args.fs if args.fs else _params_file_fs(args.params)
    n_natural = params.n_samples
    n = n_natural
    if args.samples:
        n = args.samples
    elif args.seconds:
        n = int(round(args.seconds * fs))
    if n > n_natural:
        raise ValueError(
            f"requested {n} samples but the parameter file covers only {n_natural}")
    seed = args.seed if args.seed is not None else int(os.environ.get("TVLP_SEED", 0))
    wavetable = _wavetable_from_args(args)
    dtype = np.float64 if args.precision == 64 else np.float32
    if params.mode == "sf" and args.framewise:
        x = synth.render_framewise(params, n_natural, fs, seed, wavetable, dtype=dtype)
    elif params.mode == "sf":
        x = synth.sf_synth(params, n_natural, fs, seed, wavetable, dtype=dtype)
    else:
        x = synth.hpn_synth(params, n_natural, fs, seed, wavetable, dtype=dtype)
    write_wav(args.out, x[:n], fs, args.encoding)
    log.info("wrote %s (%d samples at %d Hz)", args.out, n, fs)
    return EXIT_OK


def _wavetable_from_args(args):
    cache = getattr(args, "wavetable_cache", None)
    if cache and os.path.exists(cache):
        return source.load_wavetable(cache)
    wt = source.default_wavetable()
    if cache:
        source.save_wavetable(wt, cache)
    return wt


def cmd_fit(args):
    overrides = {name: getattr(args, name, None) for name in
                 ("mode", "steps", "lr", "clip_norm", "order", "hop", "fs",
                  "seed", "unvoiced", "max_seconds")}
    cfg = load_fit_config(args.config, overrides)
    target, _ = read_wav(args.target, target_fs=cfg.fs)
    if target.size == 0:
        raise ValueError("target WAV has no samples")
    max_samples = int(cfg.max_seconds * cfg.fs)
    if target.shape[0] > max_samples:
        log.warning("truncating target to %.1f s to bound tape memory", cfg.max_seconds)
        target = target[:max_samples]
    n_frames = expected_frame_count(target.shape[0] - 1, cfg.hop)
    times, values = read_f0_csv(args.f0)
    f0_frames = f0_track_to_frames(times, values, n_frames, cfg.hop, cfg.fs)
    wavetable = _wavetable_from_args(args)

    result = run_fit(target, f0_frames, cfg, wavetable, progress=args.progress)

    os.makedirs(args.out_dir, exist_ok=True)
    param_path = os.path.join(args.out_dir, "params.json")
    save_params(result.params, param_path)
    with open(param_path) as fh:  # append the sample rate for reproducible renders
        doc = json.load(fh)
    doc["fs"] = cfg.fs
    with open(param_path, "w") as fh:
        json.dump(doc, fh, indent=1)

    curve_path = os.path.join(args.out_dir, "loss.csv")
    with open(curve_path, "w") as fh:
        fh.write("step,loss\n")
        for i, l in enumerate(result.losses):
            fh.write(f"{i},{l:.10f}\n")

    report = {
        "config": {**asdict(cfg), "fft_sizes": list(cfg.fft_sizes)},
        "steps_run": len(result.losses),
        "best_step": result.best_step,
        "best_loss": result.best_loss,
        "rescored_loss": result.rescored_loss,
        "initial_loss": result.losses[0] if result.losses else None,
        "aborted": result.aborted,
        "seconds": result.seconds,
        "param_file": param_path,
        "loss_curve": curve_path,
        "fingerprint": _fingerprint(),
    }
    report_path = os.path.join(args.out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1)
    rel = abs(result.rescored_loss - result.best_loss) / max(result.best_loss, 1e-12)
    if rel > 1e-6:
        raise NumericalError(
            f"re-scored loss {result.rescored_loss} deviates from best {result.best_loss}")
    log.info("fit done: best loss %.6f at step %d (%.1f s); report at %s",
             result.best_loss, result.best_step, result.seconds, report_path)
    if result.aborted:
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_gradcheck(args):
    sign = -1.0 if args.negate_coeff_grad_sign else 1.0
    results = oracle.run_check_suite(seed=args.seed or 0, trials=args.trials,
                                     coeff_grad_sign=sign)
    worst_fail = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max err {r.max_err:.3e} (tol {r.tol:.0e})")
        worst_fail |= not r.passed
    return EXIT_NUMERICAL if worst_fail else EXIT_OK


def cmd_bench(args):
    rows = run_bench(args.T, args.M, repeats=args.repeats, seed=args.seed or 0)
    summary = bench_summary(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("kernel,T,M,median_s\n")
            for r in rows:
                fh.write(f"{r['kernel']},{r['T']},{r['M']},{r['median_s']:.9f}\n")
    for r in rows:
        print(f"{r['kernel']:>9} T={r['T']:>7} M={r['M']:>3} median {r['median_s'] * 1e3:10.3f} ms")
    print(f"naive/analytic ratio at T={args.T}: {summary['ratio_naive_over_analytic']:.1f}x")
    print(f"analytic doubling ratio: {summary['analytic_doubling_ratio']:.2f}")
    print(f"naive doubling ratio: {summary['naive_doubling_ratio']:.2f}")
    return EXIT_OK


def cmd_spectra(args):
    params = load_params(args.params)
    rows = reflection_to_lpc(squash_reflection(params.reflection_raw))
    write_envelope_csv(args.out, rows, args.bins)
    log.info("wrote %d frames x %d bins to %s", rows.shape[0], args.bins, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tvlp", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="render a parameter file to WAV")
    ps.add_argument("params")
    ps.add_argument("out")
    ps.add_argument("--fs", type=int, default=None)
    ps.add_argument("--samples", type=int, default=None)
    ps.add_argument("--seconds", type=float, default=None)
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--encoding", choices=("float32", "pcm16"), default="float32")
    ps.add_argument("--precision", type=int, choices=(32, 64), default=32)
    ps.add_argument("--framewise", action="store_true",
                    help="render with the frame-wise LP approximation")
    ps.add_argument("--wavetable-cache", default=None)
    ps.set_defaults(func=cmd_synth)

    pf = sub.add_parser("fit", help="fit synthesis parameters to a target WAV")
    pf.add_argument("target")
    pf.add_argument("f0", help="CSV f0 track: time_seconds,f0_hz (0 = unvoiced)")
    pf.add_argument("out_dir")
    pf.add_argument("--config", default=None, help="JSON file of FitConfig fields")
    pf.add_argument("--mode", choices=("sf", "hpn", "framewise"), default=None)
    pf.add_argument("--steps", type=int, default=None)
    pf.add_argument("--lr", type=float, default=None)
    pf.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    pf.add_argument("--order", type=int, default=None)
    pf.add_argument("--hop", type=int, default=None)
    pf.add_argument("--fs", type=int, default=None)
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--unvoiced", choices=("fixed150", "uniform"), default=None)
    pf.add_argument("--max-seconds", dest="max_seconds", type=float, default=None)
    pf.add_argument("--progress", type=int, default=100, metavar="N",
                    help="log every N steps (0 disables)")
    pf.add_argument("--wavetable-cache", default=None)
    pf.set_defaults(func=cmd_fit)

    pg = sub.add_parser("gradcheck", help="run the gradient validation suite")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--trials", type=int, default=25)
    pg.add_argument("--negate-coeff-grad-sign", action="store_true",
                    help=argparse.SUPPRESS)  # sensitivity hook for the suite itself
    pg.set_defaults(func=cmd_gradcheck)

    pb = sub.add_parser("bench", help="time analytic vs naive backward")
    pb.add_argument("--T", type=int, default=24000)
    pb.add_argument("--M", type=int, default=22)
    pb.add_argument("--repeats", type=int, default=5)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--out", default=None, help="CSV output path")
    pb.set_defaults(func=cmd_bench)

    pe = sub.add_parser("spectra", help="dump per-frame LP envelopes to CSV")
    pe.add_argument("params")
    pe.add_argument("out")
    pe.add_argument("--bins", type=int, default=256)
    pe.set_defaults(func=cmd_spectra)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, FileNotFoundError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        log.error("validation failure: %s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
