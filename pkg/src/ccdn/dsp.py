"""STFT analysis/synthesis between waveforms and (T, F, 2) real/imag maps.

Waveforms are 1-D float64 arrays at :data:`SAMPLE_RATE`. Spectrograms are
``(frames, bins, 2)`` arrays, channel 0 real and channel 1 imaginary.
:func:`istft` also accepts a :class:`~ccdn.autodiff.Tensor`, in which case
synthesis is recorded on the active tape (the inverse DFT is a fixed linear
basis applied per frame, followed by windowed overlap-add).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

SAMPLE_RATE = 16000
# synthesis envelope floor; only the first/last half-frame ever sits below it
ENVELOPE_FLOOR = 0.1


class SignalTooShort(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if self.hop <= 0 or n % self.hop:
            raise ValueError(f"hop {self.hop} must divide fft_size {n}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def frames(self, n_samples: int) -> int:
        if n_samples < self.fft_size:
            raise SignalTooShort(f"need at least {self.fft_size} samples, got {n_samples}")
        return 1 + math.ceil((n_samples - self.fft_size) / self.hop)

    def padded_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.fft_size


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, w[k] = 0.5 - 0.5 cos(2 pi k / n)."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a mono 1-D waveform")
    T = cfg.frames(len(x))
    padded = np.zeros(cfg.padded_length(T))
    padded[:len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.fft_size)[::cfg.hop]
    spec = np.fft.rfft(frames * hann_window(cfg.fft_size), axis=-1)
    return np.stack([spec.real, spec.imag], axis=-1)


@lru_cache(maxsize=8)
def _synthesis_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    # irfft written as two (bins, n) matrices acting on real and imaginary parts
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    c = np.full((n // 2 + 1, 1), 2.0)
    c[0] = c[-1] = 1.0
    ang = 2.0 * np.pi * k * t / n
    return c * np.cos(ang) / n, -c * np.sin(ang) / n


@lru_cache(maxsize=32)
def _envelope(n: int, hop: int, frames: int) -> np.ndarray:
    w2 = hann_window(n) ** 2
    env = np.zeros((frames - 1) * hop + n)
    for t in range(frames):
        env[t * hop:t * hop + n] += w2
    return np.maximum(env, ENVELOPE_FLOOR)


def istft(s, cfg: StftConfig = StftConfig(), out_len: int | None = None):
    """Inverse of :func:`stft` by weighted overlap-add.

    Returns a numpy array for array input and a Tensor for Tensor input.
    """
    as_array = not isinstance(s, ad.Tensor)
    st = ad.as_tensor(s)
    if st.ndim != 3 or st.shape[1] != cfg.bins or st.shape[2] != 2:
        raise ValueError(f"expected (T, {cfg.bins}, 2) spectrogram, got {st.shape}")
    T = st.shape[0]
    full = cfg.padded_length(T)
    if out_len is None:
        out_len = full
    if not 0 < out_len <= full:
        raise ValueError(f"out_len {out_len} outside (0, {full}]")
    cr, ci = _synthesis_basis(cfg.fft_size)
    frames = ad.matmul(st[:, :, 0], cr) + ad.matmul(st[:, :, 1], ci)
    frames = frames * hann_window(cfg.fft_size)
    y = ad.overlap_add(frames, cfg.hop) / _envelope(cfg.fft_size, cfg.hop, T)
    y = y[:out_len]
    return y.data if as_array else y


def mag_phase(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and angle of re + j*im; the angle is 0 on zero-magnitude bins."""
    s = np.asarray(s, dtype=np.float64)
    re, im = s[..., 0], s[..., 1]
    mag = np.hypot(re, im)
    theta = np.where(mag >= ad.ORIGIN_TOL, np.arctan2(im, re), 0.0)
    return mag, theta
