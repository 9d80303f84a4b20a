"""Report figures rendered straight to files (Agg canvas, no pyplot state)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import EvalReport

RC = {"dpi": 120, "width": 8.0, "height": 3.2}


def _figure(ncols: int = 1) -> tuple[Figure, list]:
    fig = Figure(figsize=(RC["width"], RC["height"]), dpi=RC["dpi"], layout="constrained")
    FigureCanvasAgg(fig)
    axes = [fig.add_subplot(1, ncols, i + 1) for i in range(ncols)]
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    return path


def eval_figure(report: EvalReport, path) -> Path:
    """Per-SNR input/output SI-SDR (dB) and ESTOI (%) as grouped bars."""
    snrs = sorted(report.by_snr)
    x = np.arange(len(snrs))
    fig, (ax_sdr, ax_stoi) = _figure(2)
    for ax, key, scale, label in ((ax_sdr, "si_sdr", 1.0, "SI-SDR (dB)"),
                                  (ax_stoi, "estoi", 100.0, "ESTOI (%)")):
        before = [scale * report.by_snr[s][f"{key}_in"] for s in snrs]
        after = [scale * report.by_snr[s][f"{key}_out"] for s in snrs]
        ax.bar(x - 0.2, before, width=0.4, label="noisy", color="0.6")
        ax.bar(x + 0.2, after, width=0.4, label="enhanced", color="tab:blue")
        ax.set_xticks(x, [f"{s:g}" for s in snrs])
        ax.set_xlabel("input SNR (dB)")
        ax.set_ylabel(label)
        ax.axhline(0.0, color="k", lw=0.5)
    ax_sdr.legend(frameon=False)
    return _save(fig, path)


def loss_figure(log_rows: list[dict], path) -> Path:
    """Training loss and SI-SDR term against optimizer step."""
    fig, (ax_loss, ax_sdr) = _figure(2)
    steps = [r["step"] for r in log_rows]
    ax_loss.plot(steps, [r["loss"] for r in log_rows], lw=1.0)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("joint loss")
    ax_sdr.plot(steps, [r["si_sdr"] for r in log_rows], lw=1.0, color="tab:green")
    ax_sdr.set_xlabel("step")
    ax_sdr.set_ylabel("train SI-SDR (dB)")
    if not log_rows:
        ax_loss.text(0.5, 0.5, "no steps", ha="center", va="center", transform=ax_loss.transAxes)
    return _save(fig, path)
