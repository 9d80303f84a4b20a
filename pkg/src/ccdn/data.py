"""WAV I/O, SNR mixing, synthetic desk corpus and dataset manifests.

Manifest format: one entry per line, whitespace separated columns::

    # clean_path  noise_path  snr_db  split  seed
    clean/utt000.wav  noise/white000.wav  0.0  train  17

Relative paths resolve against the manifest's directory. ``#`` starts a
comment. Split is one of train, val, test.
"""
from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dsp import SAMPLE_RATE

log = logging.getLogger(__name__)

TRAIN_SNRS = (-5.0, -2.0, 0.0, 2.0, 4.0, 5.0, 6.0, 10.0)
EVAL_SNRS = (-3.0, 0.0, 3.0, 6.0)
SPLITS = ("train", "val", "test")
PCM_SCALE = 32768.0


class WavFormatError(ValueError):
    pass


class SilentSignal(ValueError):
    pass


class ManifestError(ValueError):
    pass


# --- WAV ----------------------------------------------------------------------

def read_wav(path) -> np.ndarray:
    """Read 16-bit PCM mono 16 kHz audio as float64 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as f:
            ch, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            if f.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV not supported")
            raw = f.readframes(n)
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"{path}: malformed WAV ({e})") from None
    if ch != 1:
        raise WavFormatError(f"{path}: expected mono, got {ch} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE


def write_wav(path, x) -> int:
    """Write float samples as 16-bit PCM; returns the number of clipped samples."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("write_wav expects finite mono samples")
    q = np.round(x * PCM_SCALE)
    clipped = int(np.count_nonzero((q > 32767) | (q < -32768)))
    if clipped:
        log.warning("%s: %d samples clipped", path, clipped)
    pcm = np.clip(q, -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
    return clipped


# --- mixing -------------------------------------------------------------------

class Mixture(NamedTuple):
    noisy: np.ndarray
    gain: float
    scale: float  # joint peak normalization applied to clean and noise alike
    offset: int


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


def mix_at_snr(clean, noise, snr: float, seed: int) -> Mixture:
    """y = x + g * n over a seed-chosen noise segment, with SNR(x, g n) == snr.

    Power is measured over the whole clip. If the mixture would exceed full
    scale, everything is scaled down jointly and ``scale`` records the factor
    (the clean reference must be multiplied by it as well).
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) < len(clean):
        raise ValueError(f"noise ({len(noise)} samples) shorter than clean ({len(clean)})")
    if not np.isfinite(snr):
        raise ValueError("snr must be finite")
    p_clean = power(clean)
    if p_clean == 0:
        raise SilentSignal("clean signal is silent")
    offset = int(np.random.default_rng(seed).integers(0, len(noise) - len(clean) + 1))
    seg = noise[offset:offset + len(clean)]
    p_noise = power(seg)
    if p_noise == 0:
        raise SilentSignal("selected noise segment is silent")
    gain = float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr / 10.0))))
    noisy = clean + gain * seg
    peak = float(np.max(np.abs(noisy)))
    scale = 1.0 if peak <= 1.0 else 1.0 / peak
    return Mixture(noisy * scale, gain, scale, offset)


# --- synthetic signals --------------------------------------------------------

_VOWELS = ((730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410),
           (300, 870, 2240), (660, 1720, 2410), (490, 1350, 1690), (440, 1020, 2240))


def synth_speech(seconds: float, seed: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal: voiced syllables of formant-shaped harmonics.

    Each syllable has its own pitch glide and vowel formants, a raised-cosine
    loudness envelope, and short pauses in between. Peak level 0.5.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sr))
    out = np.zeros(n)
    t0 = int(rng.uniform(0.02, 0.08) * sr)
    base_f0 = rng.uniform(95, 210)
    while t0 < n:
        dur = int(rng.uniform(0.12, 0.32) * sr)
        seg = min(dur, n - t0)
        if seg < 32:
            break
        t = np.arange(seg) / sr
        f0 = base_f0 * (1 + rng.uniform(-0.15, 0.15)) * (1 + rng.uniform(-0.2, 0.2) * t / (dur / sr))
        phase = 2 * np.pi * np.cumsum(np.broadcast_to(f0, t.shape)) / sr
        formants = np.array(_VOWELS[rng.integers(len(_VOWELS))]) * rng.uniform(0.9, 1.1)
        f0_mean = float(np.mean(f0))
        syl = np.zeros(seg)
        for h in range(1, int(4000 / f0_mean) + 1):
            fh = h * f0_mean
            amp = sum(np.exp(-0.5 * ((fh - fm) / (60 + 0.06 * fm)) ** 2) for fm in formants)
            amp = (amp + 0.02) / np.sqrt(h)
            syl += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        env = np.sin(np.pi * np.arange(seg) / dur) ** 2
        out[t0:t0 + seg] += syl * env * rng.uniform(0.5, 1.0)
        t0 += dur + int(rng.uniform(0.03, 0.15) * sr)
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def synth_noise(kind: str, seconds: float, seed: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """White, babble-like (overlapping synthetic talkers) or factory-like noise, peak 0.5."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sr))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "babble":
        x = sum(synth_speech(seconds, int(s), sr) for s in rng.integers(0, 2**31, size=6))
    elif kind == "factory":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / sr)
        spec /= np.sqrt(np.maximum(f, 20.0))  # pink-ish tilt
        x = np.fft.irfft(spec, n)
        x /= np.std(x)
        t = np.arange(n) / sr
        x += sum(0.4 / k * np.sin(2 * np.pi * 50 * k * t) for k in range(1, 8))
        for start in rng.integers(0, n, size=max(1, int(seconds * 3))):
            m = min(int(0.03 * sr), n - start)
            x[start:start + m] += 3 * rng.standard_normal(m) * np.exp(-np.arange(m) / (0.005 * sr))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x * (0.5 / np.max(np.abs(x)))


# --- manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    clean_path: Path
    noise_path: Path
    snr_db: float
    split: str
    seed: int
    index: int = 0

    @property
    def id(self) -> str:
        return f"{self.index:04d}_{self.clean_path.stem}"


def read_manifest(path, check_paths: bool = True) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) != 5:
            raise ManifestError(f"{path}:{n}: expected 5 columns, got {len(cols)}")
        clean, noise, snr, split, seed = cols
        try:
            snr_v, seed_v = float(snr), int(seed)
        except ValueError:
            raise ManifestError(f"{path}:{n}: bad snr or seed") from None
        if not np.isfinite(snr_v):
            raise ManifestError(f"{path}:{n}: snr must be finite")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{n}: split must be one of {SPLITS}")
        cp, np_ = root / clean, root / noise
        if check_paths:
            for p in (cp, np_):
                if not p.is_file():
                    raise ManifestError(f"{path}:{n}: missing file {p}")
        entries.append(ManifestEntry(cp, np_, snr_v, split, seed_v, len(entries)))
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = ["# clean_path noise_path snr_db split seed"]
    for e in entries:
        c = Path(e.clean_path).resolve().relative_to(root)
        z = Path(e.noise_path).resolve().relative_to(root)
        lines.append(f"{c.as_posix()} {z.as_posix()} {e.snr_db:g} {e.split} {e.seed}")
    path.write_text("\n".join(lines) + "\n")


def split_entries(entries, split: str) -> list[ManifestEntry]:
    return [e for e in entries if e.split == split]


def load_pair(entry: ManifestEntry, crop: int | None = None, rng: np.random.Generator | None = None):
    """Return (clean, noisy) for an entry, both scaled by the mixture's peak factor.

    With ``crop``, a random window of that many samples is cut from the clean
    utterance first (offset drawn from ``rng``; start of file if rng is None).
    """
    clean = read_wav(entry.clean_path)
    noise = read_wav(entry.noise_path)
    if crop is not None and len(clean) > crop:
        start = 0 if rng is None else int(rng.integers(0, len(clean) - crop + 1))
        clean = clean[start:start + crop]
    mix = mix_at_snr(clean, noise, entry.snr_db, entry.seed)
    return clean * mix.scale, mix.noisy


def make_synthetic_corpus(root, n_train: int = 8, n_val: int = 2, n_test: int = 4,
                          seconds: float = 2.0, noise_kinds=("white", "babble", "factory"),
                          train_snrs=TRAIN_SNRS, test_snrs=EVAL_SNRS, seed: int = 0) -> Path:
    """Write clean/noise WAVs plus ``manifest.txt`` under ``root``; returns the manifest path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    noises = []
    for i, kind in enumerate(noise_kinds):
        p = root / "noise" / f"{kind}.wav"
        write_wav(p, synth_noise(kind, seconds * 3, int(rng.integers(2**31))))
        noises.append(p)
    entries = []
    plan = [("train", n_train, train_snrs), ("val", n_val, train_snrs), ("test", n_test, test_snrs)]
    k = 0
    for split, count, snrs in plan:
        for j in range(count):
            p = root / "clean" / f"{split}{j:03d}.wav"
            write_wav(p, synth_speech(seconds, int(rng.integers(2**31))))
            entries.append(ManifestEntry(p, noises[k % len(noises)], float(snrs[j % len(snrs)]),
                                         split, int(rng.integers(2**31)), k))
            k += 1
    manifest = root / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
