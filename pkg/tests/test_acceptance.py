"""Acceptance gate: ten end-to-end criteria at their stated tolerances.

Run alone with ``pytest tests/test_acceptance.py``; the terminal summary ends
with one PASS/FAIL line per criterion.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from ccdn import autodiff as ad
from ccdn import cli, trainer
from ccdn.autodiff import Tensor, finite_difference_check
from ccdn.blocks import CCDN, cb_forward, compensate, param_count
from ccdn.config import ModelConfig
from ccdn.data import (EVAL_SNRS, TRAIN_SNRS, ManifestEntry, load_pair, make_synthetic_corpus,
                       mix_at_snr, read_manifest, snr_db, synth_noise, synth_speech, write_manifest,
                       write_wav)
from ccdn.dsp import SAMPLE_RATE, StftConfig, istft, stft
from ccdn.layers import ConvSpec, MHSAConfig, batch_norm, conv, glu, layer_norm, mhsa
from ccdn.losses import si_sdr
from ccdn.metrics import estoi

from conftest import GRAD_EPS, projected

RECIPES = Path(__file__).resolve().parent.parent / "recipes"


@pytest.mark.criterion(1, "STFT round trip, interior error < 1e-6 in < 1 s")
def test_stft_round_trip():
    x = np.random.default_rng(0).standard_normal(SAMPLE_RATE)
    cfg = StftConfig(512, 256)
    t0 = time.perf_counter()
    y = istft(stft(x, cfg), cfg, out_len=len(x))
    elapsed = time.perf_counter() - t0
    err = np.max(np.abs(y - x)[cfg.fft_size:-cfg.fft_size])
    assert err < 1e-6
    assert elapsed < 1.0


def _primitive_checks(rng):
    x4 = rng.standard_normal((2, 3, 4, 6))
    w_conv = rng.standard_normal((2, 3, 3, 3))
    w_tconv = rng.standard_normal((3, 2, 1, 3))
    w_ih, w_hh = rng.standard_normal((8, 6)) * 0.5, rng.standard_normal((8, 2)) * 0.5
    w_attn = [rng.standard_normal((4, 4)) * 0.5 for _ in range(4)]
    tspec = ConvSpec(2, 3, 2, (1, 3), stride=(1, 2), padding=(0, 1), transposed=True, output_padding=(0, 1))
    checks = {
        "conv2d": (lambda t: conv(t, ConvSpec(2, 3, 2, (3, 3), padding=(1, 1)), w_conv), x4),
        "conv_transpose": (lambda t: conv(t, tspec, w_tconv), x4),
        "glu": (lambda t: glu(ad.concat([t, t * 0.5], axis=1), axis=1), x4),
        "elu": (ad.elu, x4),
        "sigmoid": (ad.sigmoid, x4),
        "layer_norm": (lambda t: layer_norm(t, None, None, axes=(1, 3)), x4),
        "batch_norm": (lambda t: batch_norm(t, None), x4),
        "lstm": (lambda t: ad.lstm(t, w_ih, w_hh, np.zeros(8)), rng.standard_normal((2, 4, 6))),
        "mhsa": (lambda t: mhsa(t, MHSAConfig(4, 2), *w_attn), rng.standard_normal((2, 5, 4))),
        "softmax": (lambda t: ad.softmax(t, -1), x4),
        "istft": (lambda t: istft(t, StftConfig(16, 8)), rng.standard_normal((3, 9, 2))),
    }
    errors = {}
    for name, (fn, x0) in checks.items():
        x = Tensor(x0.copy(), requires_grad=True)
        idx = None
        if name == "istft":
            # imaginary DC/Nyquist parts have an identically zero derivative
            dead = np.zeros(x0.shape, bool)
            dead[:, [0, -1], 1] = True
            idx = np.flatnonzero(~dead.reshape(-1))
        errors[name] = finite_difference_check(projected(fn), x, GRAD_EPS, idx)
    return errors


@pytest.mark.criterion(2, "gradient oracle: primitives < 1e-6, desk model < 1e-4 in < 2 min")
def test_gradient_oracle():
    errors = _primitive_checks(np.random.default_rng(1))
    bad = {k: v for k, v in errors.items() if not v < 1e-6}
    assert not bad, bad

    cfg = trainer.gradcheck_config()
    assert max(cfg.feb.channels, cfg.mb.channels, cfg.comeb.channels) <= 8
    t0 = time.perf_counter()
    res = trainer.gradcheck_model(cfg, seed=0, frames=4)
    elapsed = time.perf_counter() - t0
    assert res["checked"] == len(list(CCDN(cfg, None).named_parameters())) + 1
    assert res["max_error"] < 1e-4, (res["worst"], res["max_error"])
    assert elapsed < 120.0


@pytest.mark.criterion(3, "compensation algebra: passthrough, doubling, |Comp| = Smag, worked example")
def test_compensation_algebra():
    rng = np.random.default_rng(2)
    ri = rng.standard_normal((20, 257, 2))
    zero = cb_forward(ri, np.zeros((20, 257)))
    assert np.array_equal(zero.r_n.data, ri[..., 0]) and np.array_equal(zero.i_n.data, ri[..., 1])
    one = cb_forward(ri, np.ones((20, 257)))
    assert np.array_equal(one.r_n.data, 2 * ri[..., 0]) and np.array_equal(one.i_n.data, 2 * ri[..., 1])
    part = cb_forward(ri, rng.uniform(0, 1, (20, 257)))
    assert np.max(np.abs(np.hypot(part.comp_r.data, part.comp_i.data) - part.smag.data)) < 1e-9
    ex = compensate(3.0, 4.0, 0.5)
    assert abs(float(ex.r_n.data) - 4.5) <= 1e-12 and abs(float(ex.i_n.data) - 6.0) <= 1e-12


@pytest.mark.criterion(4, "mask strictly inside (0, 1) over 10 random desk forwards")
def test_mask_range():
    cfg = ModelConfig()
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        model = CCDN(cfg, rng)
        if seed % 2:
            model.eval()
        spec = stft(rng.standard_normal(int(rng.integers(1024, 8000))) * rng.uniform(0.01, 3.0), cfg.stft)
        mask = model.details(spec)["mask"].data
        assert np.all(mask > 0.0) and np.all(mask < 1.0)


@pytest.mark.criterion(5, "SI-SDR: orthogonal 10 dB construction, scale invariance")
def test_si_sdr_correctness():
    rng = np.random.default_rng(3)
    ref = rng.standard_normal(SAMPLE_RATE)
    e = rng.standard_normal(SAMPLE_RATE)
    e -= np.dot(e, ref) / np.dot(ref, ref) * ref
    e *= np.sqrt(np.dot(ref, ref) / (10.0 * np.dot(e, e)))
    est = ref + e
    base = si_sdr(est, ref)
    assert abs(base - 10.0) < 1e-6
    for c in np.geomspace(0.1, 10.0, 21):
        assert abs(si_sdr(est, c * ref) - base) < 1e-6


@pytest.mark.criterion(6, "ESTOI: identity = 1, strictly decreasing over +10/0/-10 dB")
def test_estoi_sanity():
    clean = synth_speech(3.0, seed=21)
    noise = synth_noise("white", 3.0, seed=22)
    assert abs(estoi(clean, clean) - 1.0) < 1e-6
    scores = []
    for snr in (10.0, 0.0, -10.0):
        mix = mix_at_snr(clean, noise, snr, seed=0)
        scores.append(estoi(clean * mix.scale, mix.noisy))
    assert scores[0] > scores[1] > scores[2]


@pytest.mark.criterion(7, "tiny overfit: +5 dB SI-SDR within 200 steps, loss falls for 20 steps")
def test_tiny_overfit(tmp_path):
    write_wav(tmp_path / "clean.wav", synth_speech(2.0, seed=1))
    write_wav(tmp_path / "noise.wav", synth_noise("white", 2.0, seed=2))
    manifest = tmp_path / "manifest.txt"
    write_manifest(manifest, [ManifestEntry(tmp_path / "clean.wav", tmp_path / "noise.wav", 0.0, "train", 3)])
    out = tmp_path / "run"
    t0 = time.perf_counter()
    code = cli.main(["train", "--config", str(RECIPES / "tiny_overfit.cfg"), "--manifest", str(manifest),
                     "--out", str(out), "--no-plot"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    log = trainer.read_log(out / "train_log.csv")
    assert 20 <= len(log) <= 200
    first = [r["loss"] for r in log[:20]]
    assert all(b < a for a, b in zip(first, first[1:])), first

    clean, noisy = load_pair(read_manifest(manifest)[0])
    model = trainer.model_from_checkpoint(trainer.load_checkpoint(out / "last.ckpt"))
    gain = si_sdr(trainer.enhance(model, noisy), clean) - si_sdr(noisy, clean)
    assert gain >= 5.0, gain
    assert elapsed < 600.0


@pytest.mark.criterion(8, "large-preset parameter count > 5e7")
def test_large_preset_parameter_count():
    assert param_count(ModelConfig.paper()) > 5e7


@pytest.mark.criterion(9, "mixing hits every requested SNR within 1e-9 dB")
def test_mixing_exactness():
    clean = synth_speech(2.0, seed=31)
    noise = synth_noise("babble", 4.0, seed=32)
    for snr in sorted(set(TRAIN_SNRS) | set(EVAL_SNRS)):
        mix = mix_at_snr(clean, noise, snr, seed=int(snr * 10) + 100)
        ref = clean * mix.scale
        assert abs(snr_db(ref, mix.noisy - ref) - snr) < 1e-9


@pytest.mark.criterion(10, "determinism: train log and enhanced audio identical across runs")
def test_determinism(tmp_path):
    manifest = make_synthetic_corpus(tmp_path / "corpus", n_train=2, n_val=0, n_test=1, seconds=1.0)
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(out), "--seed", "7",
                         "--set", "train.epochs=2", "--set", "train.crop_seconds=0.5", "--no-plot"]) == 0
        logs.append((out / "train_log.csv").read_bytes())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 5

    src = read_manifest(manifest)[-1].clean_path
    outs = []
    for run in ("a", "b"):
        dst = tmp_path / f"enh_{run}.wav"
        assert cli.main(["enhance", "--checkpoint", str(tmp_path / run / "last.ckpt"), str(src), str(dst)]) == 0
        outs.append(dst.read_bytes())
    assert outs[0] == outs[1]
