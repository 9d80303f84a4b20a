import numpy as np

from ccdn.metrics import evaluate
from ccdn.plotting import eval_figure, loss_figure

PNG = b"\x89PNG\r\n\x1a\n"


def _report(rng):
    clean = np.sin(np.arange(16000) * 0.05) * np.hanning(16000)
    noise = rng.standard_normal(16000) * 0.1
    return evaluate([(clean, clean + noise, clean + 0.5 * noise)] * 2, [0.0, 5.0], ids=["a", "b"])


def test_eval_figure_is_written_reproducibly(tmp_path, rng):
    rep = _report(rng)
    a = eval_figure(rep, tmp_path / "a.png")
    b = eval_figure(rep, tmp_path / "sub" / "b.png")
    assert a.read_bytes()[:8] == PNG
    assert a.read_bytes() == b.read_bytes()


def test_loss_figure_handles_empty_and_full_logs(tmp_path):
    rows = [{"step": i, "loss": 5.0 - i, "si_sdr": float(i)} for i in range(1, 6)]
    assert loss_figure(rows, tmp_path / "l.png").read_bytes()[:8] == PNG
    assert loss_figure([], tmp_path / "e.png").stat().st_size > 0
