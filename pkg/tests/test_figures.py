"""Report figures render to valid PNG files without a display."""

import numpy as np
import pytest

from mhattnsurv import figures
from mhattnsurv.evaluate import km_estimator
from mhattnsurv.train import HistoryRow

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _assert_png(path):
    raw = path.read_bytes()
    assert raw[:8] == PNG_MAGIC
    assert len(raw) > 1000


def _history():
    rows = []
    for epoch in range(20):
        rows.append(
            HistoryRow(
                epoch=epoch,
                step=epoch + 1,
                lr=1e-3 * (1 - epoch / 40),
                train_loss=2.0 / (epoch + 1),
                val_cindex=0.5 + 0.02 * epoch if epoch % 5 == 4 else None,
                skipped_batches=0,
            )
        )
    return rows


class TestFigures:
    def test_history(self, tmp_path):
        path = tmp_path / "history.png"
        figures.plot_history(_history(), path)
        _assert_png(path)

    def test_history_without_validation(self, tmp_path):
        rows = [
            HistoryRow(epoch=e, step=e, lr=1e-3, train_loss=1.0 / (e + 1),
                       val_cindex=None, skipped_batches=0)
            for e in range(5)
        ]
        path = tmp_path / "history.png"
        figures.plot_history(rows, path)
        _assert_png(path)

    def test_km_curves(self, tmp_path):
        curves = {
            "low": km_estimator([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0]),
            "high": km_estimator([0.5, 1.0, 1.5], [1, 1, 1]),
        }
        path = tmp_path / "km.png"
        figures.plot_km_curves(curves, path)
        _assert_png(path)

    def test_auc_over_time_with_gaps(self, tmp_path):
        path = tmp_path / "auc.png"
        figures.plot_auc_over_time([1.0, 2.0, 3.0], [0.6, None, 0.7], path)
        _assert_png(path)

    def test_correlation_matrix_with_nans(self, tmp_path):
        m = np.array([[1.0, 0.3, np.nan], [0.3, 1.0, -0.2], [np.nan, -0.2, 1.0]])
        path = tmp_path / "corr.png"
        figures.plot_matrix(m, path, title="attention score correlation")
        _assert_png(path)

    def test_attention_grid(self, tmp_path):
        rng = np.random.default_rng(80)
        path = tmp_path / "grid.png"
        figures.plot_attention_grid(rng.uniform(0, 2, size=(6, 8)), path, head=0)
        _assert_png(path)

    def test_cv_folds(self, tmp_path):
        path = tmp_path / "folds.png"
        figures.plot_cv_folds([0.61, 0.57, 0.64], 0.6067, path, kind="mhattn")
        _assert_png(path)

    def test_ablation(self, tmp_path):
        path = tmp_path / "ablation.png"
        figures.plot_ablation([1, 4, 8], [0.58, 0.63, 0.62], path)
        _assert_png(path)
