import json
import os

import numpy as np
import pytest

from tvlp import cli
from tvlp.cli import (EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, FitConfig,
                      f0_track_to_frames, load_fit_config, read_f0_csv, read_wav,
                      run_bench, bench_summary, write_f0_csv, write_wav)
from tvlp.params import expected_frame_count
from tvlp.synth import init_params, save_params, sf_synth


def _seed_params(tmp_path, rng, n=12000, hop=240, order=6, fs=24000, quiet=False):
    F = expected_frame_count(n - 1, hop)
    p = init_params(F, order, hop, mode="sf", seed=1)
    p.f0_frames[:] = 150.0 + 20 * np.sin(np.linspace(0, 5, F))
    if quiet:
        p.voiced_gain_raw[:] = -800.0
        p.noise_gain_raw[:] = -800.0
        p.reflection_raw[:] = 0.0
    else:
        p.voiced_gain_raw[:] = -1.2
        p.reflection_raw[:] = rng.normal(0, 0.25, (F, order))
    path = str(tmp_path / "params.json")
    save_params(p, path)
    doc = json.load(open(path))
    doc["fs"] = fs
    json.dump(doc, open(path, "w"))
    return p, path


class TestWavIO:
    def test_float32_round_trip(self, tmp_path, rng):
        x = rng.uniform(-0.5, 0.5, 1000)
        path = str(tmp_path / "a.wav")
        write_wav(path, x, 24000)
        back, fs = read_wav(path)
        assert fs == 24000
        np.testing.assert_allclose(back, x, atol=1e-7)

    def test_pcm16_round_trip(self, tmp_path, rng):
        x = rng.uniform(-0.9, 0.9, 500)
        path = str(tmp_path / "a.wav")
        write_wav(path, x, 24000, encoding="pcm16")
        back, _ = read_wav(path)
        np.testing.assert_allclose(back, x, atol=1.0 / 32767)

    def test_resampled_on_load(self, tmp_path, rng):
        x = np.sin(2 * np.pi * 440 * np.arange(48000) / 48000)
        path = str(tmp_path / "a.wav")
        write_wav(path, x, 48000)
        back, fs = read_wav(path, target_fs=24000)
        assert fs == 24000 and abs(len(back) - 24000) <= 1

    def test_stereo_averaged(self, tmp_path):
        import scipy.io.wavfile

        data = np.stack([np.ones(100), -np.ones(100)], axis=1).astype(np.float32)
        path = str(tmp_path / "st.wav")
        scipy.io.wavfile.write(path, 24000, data)
        back, _ = read_wav(path)
        np.testing.assert_allclose(back, 0.0, atol=1e-7)


class TestF0Csv:
    def test_round_trip(self, tmp_path):
        f0 = np.array([0.0, 150.0, 180.0, 0.0])
        path = str(tmp_path / "f0.csv")
        write_f0_csv(path, f0, 240, 24000)
        times, values = read_f0_csv(path)
        frames = f0_track_to_frames(times, values, 4, 240, 24000)
        np.testing.assert_array_equal(frames, f0)

    def test_header_tolerated(self, tmp_path):
        path = str(tmp_path / "f0.csv")
        open(path, "w").write("time_seconds,f0_hz\n0.0,100\n0.5,0\n")
        times, values = read_f0_csv(path)
        np.testing.assert_array_equal(values, [100.0, 0.0])

    def test_nearest_sampling_preserves_unvoiced_zeros(self):
        times = np.array([0.0, 0.01, 0.02, 0.03])
        values = np.array([100.0, 0.0, 0.0, 140.0])
        frames = f0_track_to_frames(times, values, 4, 240, 24000)
        np.testing.assert_array_equal(frames, values)

    def test_empty_rejected(self, tmp_path):
        path = str(tmp_path / "f0.csv")
        open(path, "w").write("time_seconds,f0_hz\n")
        with pytest.raises(ValueError, match="no data"):
            read_f0_csv(path)


class TestFitConfig:
    def test_defaults_match_documented_settings(self):
        cfg = FitConfig()
        assert cfg.lr == 1e-4 and cfg.clip_norm == 0.5
        assert cfg.order == 22 and cfg.hop == 240 and cfg.fs == 24000
        assert cfg.steps == 2000 and cfg.max_seconds == 2.0
        assert cfg.fft_sizes == (509, 1021, 2053)

    def test_file_and_flag_precedence(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        json.dump({"steps": 5, "lr": 0.01, "seed": 7}, open(path, "w"))
        cfg = load_fit_config(path, overrides={"lr": 0.02}, env={})
        assert cfg.steps == 5 and cfg.lr == 0.02 and cfg.seed == 7

    def test_env_seed_fallback(self):
        cfg = load_fit_config(None, overrides={}, env={"TVLP_SEED": "123"})
        assert cfg.seed == 123
        cfg = load_fit_config(None, overrides={"seed": 9}, env={"TVLP_SEED": "123"})
        assert cfg.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        json.dump({"nope": 1}, open(path, "w"))
        with pytest.raises(ValueError, match="nope"):
            load_fit_config(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError, match="steps"):
            FitConfig(steps=0).validate()
        with pytest.raises(ValueError, match="mode"):
            FitConfig(mode="bogus").validate()
        with pytest.raises(ValueError, match="unvoiced"):
            FitConfig(unvoiced="maybe").validate()


class TestSynthCommand:
    def test_silent_params_render_silence_of_requested_length(self, tmp_path, rng):
        _, ppath = _seed_params(tmp_path, rng, quiet=True)
        out = str(tmp_path / "out.wav")
        assert cli.main(["synth", ppath, out, "--samples", "4800"]) == EXIT_OK
        x, fs = read_wav(out)
        assert fs == 24000 and len(x) == 4800 and not x.any()

    def test_byte_identical_renders(self, tmp_path, rng):
        _, ppath = _seed_params(tmp_path, rng)
        a, b = str(tmp_path / "a.wav"), str(tmp_path / "b.wav")
        assert cli.main(["synth", ppath, a, "--seed", "5"]) == EXIT_OK
        assert cli.main(["synth", ppath, b, "--seed", "5"]) == EXIT_OK
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_overlong_request_rejected(self, tmp_path, rng):
        _, ppath = _seed_params(tmp_path, rng)
        out = str(tmp_path / "out.wav")
        assert cli.main(["synth", ppath, out, "--seconds", "100"]) == EXIT_VALIDATION

    def test_missing_params_file_is_io_error(self, tmp_path):
        assert cli.main(["synth", str(tmp_path / "nope.json"),
                         str(tmp_path / "o.wav")]) == EXIT_IO

    def test_malformed_params_file_is_validation_error(self, tmp_path):
        bad = str(tmp_path / "bad.json")
        open(bad, "w").write('{"format": "tvlp-params-v1"}')
        assert cli.main(["synth", bad, str(tmp_path / "o.wav")]) == EXIT_VALIDATION


class TestFitCommand:
    def test_smoke_fit_writes_artifacts(self, tmp_path, rng):
        gt, ppath = _seed_params(tmp_path, rng, n=6000, order=4)
        target = sf_synth(gt, 6000, 24000, seed=3, dtype=np.float64)
        wav = str(tmp_path / "target.wav")
        write_wav(wav, target, 24000)
        f0csv = str(tmp_path / "f0.csv")
        write_f0_csv(f0csv, gt.f0_frames, 240, 24000)
        out_dir = str(tmp_path / "fit")
        code = cli.main(["fit", wav, f0csv, out_dir, "--steps", "3",
                         "--order", "4", "--seed", "3", "--progress", "0"])
        assert code == EXIT_OK
        report = json.load(open(os.path.join(out_dir, "report.json")))
        assert report["steps_run"] == 3
        assert len(open(os.path.join(out_dir, "loss.csv")).readlines()) == 4
        # round-trip: the saved parameters re-score to the reported best loss
        rel = abs(report["rescored_loss"] - report["best_loss"]) / report["best_loss"]
        assert rel <= 1e-6
        assert os.path.exists(report["param_file"])

    def test_zero_length_audio_rejected(self, tmp_path):
        import scipy.io.wavfile

        wav = str(tmp_path / "empty.wav")
        scipy.io.wavfile.write(wav, 24000, np.zeros(0, dtype=np.float32))
        f0csv = str(tmp_path / "f0.csv")
        open(f0csv, "w").write("0.0,100\n")
        assert cli.main(["fit", wav, f0csv, str(tmp_path / "o"),
                         "--steps", "1"]) == EXIT_VALIDATION

    def test_truncates_to_max_seconds(self, tmp_path, rng):
        fs, hop = 24000, 240
        n = int(0.7 * fs)
        F = expected_frame_count(int(0.5 * fs) - 1, hop)
        wav = str(tmp_path / "t.wav")
        write_wav(wav, 0.05 * rng.standard_normal(n), fs)
        f0csv = str(tmp_path / "f0.csv")
        write_f0_csv(f0csv, np.full(F, 150.0), hop, fs)
        out_dir = str(tmp_path / "fit")
        code = cli.main(["fit", wav, f0csv, out_dir, "--steps", "1", "--order", "4",
                        "--max-seconds", "0.5", "--progress", "0"])
        assert code == EXIT_OK


class TestGradcheckCommand:
    def test_clean_suite_exits_zero(self):
        assert cli.main(["gradcheck", "--trials", "4"]) == EXIT_OK

    def test_forced_sign_bug_fails(self):
        assert cli.main(["gradcheck", "--trials", "3",
                         "--negate-coeff-grad-sign"]) == EXIT_NUMERICAL


class TestBenchCommand:
    def test_small_bench_rows_and_csv(self, tmp_path):
        out = str(tmp_path / "bench.csv")
        assert cli.main(["bench", "--T", "1024", "--M", "4", "--repeats", "2",
                         "--out", out]) == EXIT_OK
        lines = open(out).read().strip().splitlines()
        assert lines[0] == "kernel,T,M,median_s"
        assert len(lines) == 5

    def test_naive_scales_superlinearly(self):
        rows = run_bench(4096, 8, repeats=3, seed=1)
        summary = bench_summary(rows)
        assert summary["naive_doubling_ratio"] > 3.0
        assert summary["ratio_naive_over_analytic"] > 1.0

    def test_too_small_T_rejected(self):
        assert cli.main(["bench", "--T", "512"]) == EXIT_VALIDATION


class TestSpectraCommand:
    def test_zero_reflections_flat_envelopes(self, tmp_path, rng):
        _, ppath = _seed_params(tmp_path, rng, quiet=True)
        out = str(tmp_path / "env.csv")
        assert cli.main(["spectra", ppath, out, "--bins", "32"]) == EXIT_OK
        rows = open(out).read().strip().splitlines()[1:]
        F = expected_frame_count(11999, 240)
        assert len(rows) == F * 32
        vals = np.array([float(r.split(",")[2]) for r in rows])
        np.testing.assert_allclose(vals, 0.0, atol=1e-9)

    def test_row_count_matches_frames(self, tmp_path, rng):
        _, ppath = _seed_params(tmp_path, rng)
        out = str(tmp_path / "env.csv")
        assert cli.main(["spectra", ppath, out, "--bins", "16"]) == EXIT_OK
        rows = open(out).read().strip().splitlines()[1:]
        frames = {int(r.split(",")[0]) for r in rows}
        assert len(frames) == expected_frame_count(11999, 240)
