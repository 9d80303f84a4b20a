"""Objective evaluation: SI-SDR and ESTOI, plus the per-SNR evaluation report.

ESTOI follows Jensen & Taal's extended STOI: 10 kHz processing, removal of
frames more than 40 dB below the loudest clean frame, 15 one-third octave
bands from 150 Hz, 30-frame (384 ms) segments whose band envelopes are
normalized along time and then along frequency, and the mean correlation of
the normalized segments. PESQ is not provided (licensed algorithm).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .dsp import SAMPLE_RATE
from .losses import si_sdr

ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30  # frames; 384 ms at 10 kHz with hop 128
ESTOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps

CSV_HEADER = ("id", "snr_db", "si_sdr_in", "si_sdr_out", "estoi_in", "estoi_out")


class TooShortForEstoi(ValueError):
    pass


@lru_cache(maxsize=4)
def third_octave_bands(fs: int = ESTOI_FS, nfft: int = ESTOI_NFFT, bands: int = ESTOI_BANDS,
                       min_freq: float = ESTOI_MIN_FREQ) -> np.ndarray:
    """(bands, nfft/2+1) 0/1 matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(bands, dtype=float)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((bands, len(f)))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x, n, hop):
    w = np.hanning(n + 2)[1:-1]
    starts = range(0, len(x) - n, hop)
    return np.array([w * x[i:i + n] for i in starts]).reshape(-1, n)


def _overlap_add(frames, hop):
    n_frames, n = frames.shape
    out = np.zeros((n_frames - 1) * hop + n) if n_frames else np.zeros(0)
    for i, fr in enumerate(frames):
        out[i * hop:i * hop + n] += fr
    return out


def remove_silent_frames(x, y, dyn_range=ESTOI_DYN_RANGE, n=ESTOI_FRAME, hop=ESTOI_FRAME // 2):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the peak frame."""
    xf, yf = _frames(x, n, hop), _frames(y, n, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range if len(energy) else np.zeros(0, bool)
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x):
    frames = _frames(x, ESTOI_FRAME, ESTOI_FRAME // 2)
    spec = np.fft.rfft(frames, n=ESTOI_NFFT, axis=1)
    return np.sqrt(third_octave_bands() @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _normalize(seg, axis):
    seg = seg - seg.mean(axis=axis, keepdims=True)
    norm = np.sqrt(np.sum(seg * seg, axis=axis, keepdims=True))
    return seg / np.maximum(norm, _EPS)


def estoi(clean, processed, fs: int = SAMPLE_RATE) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    processed = np.asarray(processed, dtype=np.float64)
    if clean.shape != processed.shape or clean.ndim != 1:
        raise ValueError(f"estoi needs equal-length mono signals, got {clean.shape}, {processed.shape}")
    if fs != ESTOI_FS:
        g = np.gcd(fs, ESTOI_FS)
        clean = resample_poly(clean, ESTOI_FS // g, fs // g)
        processed = resample_poly(processed, ESTOI_FS // g, fs // g)
    x, y = remove_silent_frames(clean, processed)
    X, Y = _band_envelopes(x), _band_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < ESTOI_SEGMENT:
        raise TooShortForEstoi(f"only {n_frames} active frames; ESTOI needs {ESTOI_SEGMENT} (384 ms)")
    idx = np.arange(n_frames - ESTOI_SEGMENT + 1)[:, None] + np.arange(ESTOI_SEGMENT)
    xs = X[:, idx].transpose(1, 0, 2)  # (segments, bands, frames)
    ys = Y[:, idx].transpose(1, 0, 2)
    xn = _normalize(_normalize(xs, axis=2), axis=1)
    yn = _normalize(_normalize(ys, axis=2), axis=1)
    return float(np.sum(xn * yn) / (ESTOI_SEGMENT * xs.shape[0]))


# --- report -------------------------------------------------------------------

@dataclass
class EvalRow:
    id: str
    snr_db: float
    si_sdr_in: float
    si_sdr_out: float
    estoi_in: float
    estoi_out: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    by_snr: dict[float, dict[str, float]] = field(default_factory=dict)

    def means(self, rows=None) -> dict[str, float]:
        rows = self.rows if rows is None else rows
        return {k: float(np.mean([getattr(r, k) for r in rows])) for k in CSV_HEADER[2:]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.id, f"{r.snr_db:g}"] + [repr(getattr(r, k)) for k in CSV_HEADER[2:]])
        return buf.getvalue()

    def to_table(self) -> str:
        """Per-SNR means with ESTOI rendered in percent."""
        head = f"{'SNR (dB)':>9} {'n':>3} {'SI-SDR in':>10} {'SI-SDR out':>11} {'ESTOI in %':>11} {'ESTOI out %':>12}"
        lines = [head, "-" * len(head)]

        def fmt(label, n, m):
            return (f"{label:>9} {n:>3} {m['si_sdr_in']:>10.2f} {m['si_sdr_out']:>11.2f} "
                    f"{100 * m['estoi_in']:>11.2f} {100 * m['estoi_out']:>12.2f}")
        for snr, m in sorted(self.by_snr.items()):
            n = sum(1 for r in self.rows if r.snr_db == snr)
            lines.append(fmt(f"{snr:g}", n, m))
        lines.append(fmt("avg", len(self.rows), self.means()))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{stem}.csv", "table": out_dir / f"{stem}.txt"}
        paths["csv"].write_text(self.to_csv())
        paths["table"].write_text(self.to_table())
        return paths


def read_report_csv(path) -> list[EvalRow]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if tuple(rd.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        return [EvalRow(r["id"], float(r["snr_db"]), *(float(r[k]) for k in CSV_HEADER[2:]))
                for r in rd]


def evaluate(triples, snrs, ids=None) -> EvalReport:
    """Score (clean, noisy, enhanced) triples; rows sorted by (snr, id)."""
    triples = list(triples)
    snrs = list(snrs)
    if not triples:
        raise ValueError("evaluate needs at least one triple")
    if len(snrs) != len(triples):
        raise ValueError("one SNR per triple required")
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(triples))]
    rows = []
    for rid, snr, (clean, noisy, enh) in zip(ids, snrs, triples):
        clean, noisy, enh = (np.asarray(a, dtype=np.float64) for a in (clean, noisy, enh))
        if not clean.shape == noisy.shape == enh.shape:
            raise ValueError(f"{rid}: misaligned triple")
        rows.append(EvalRow(rid, float(snr), si_sdr(noisy, clean), si_sdr(enh, clean),
                            estoi(clean, noisy), estoi(clean, enh)))
    rows.sort(key=lambda r: (r.snr_db, r.id))
    report = EvalReport(rows)
    for snr in sorted({r.snr_db for r in rows}):
        report.by_snr[snr] = report.means([r for r in rows if r.snr_db == snr])
    return report
