"""Report figures rendered next to the delimited outputs.

Every function takes already-computed results and writes one PNG; nothing
here recomputes statistics. The Agg backend keeps rendering headless and
reproducible.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)


def plot_history(history, path) -> None:
    """Training loss and validation c-index over epochs on twin axes."""
    epochs = [row.epoch for row in history]
    losses = [row.train_loss for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, losses, color="tab:blue", lw=1.0, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Cox loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ev = [(row.epoch, row.val_cindex) for row in history if row.val_cindex is not None]
    if ev:
        ax2 = ax.twinx()
        ax2.plot(*zip(*ev), color="tab:red", marker="o", ms=3, lw=1.0, label="val c-index")
        ax2.set_ylabel("validation c-index", color="tab:red")
        ax2.tick_params(axis="y", labelcolor="tab:red")
        ax2.set_ylim(0.0, 1.0)
    ax.set_title("training history")
    _save(fig, path)


def plot_km_curves(curves: dict, path, title: str = "Kaplan-Meier") -> None:
    """Step plot per labeled KMCurve (post-estimate; drops at event times)."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, curve in curves.items():
        t = np.concatenate([[0.0], curve.times])
        s = np.concatenate([[1.0], curve.survival])
        ax.step(t, s, where="post", label=f"{label} (n={curve.n_start})")
    ax.set_xlabel("time")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="best", fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def plot_auc_over_time(times, aucs, path) -> None:
    """IPCW AUC(t) at the evaluated horizons; skipped horizons are gaps."""
    fig, ax = plt.subplots(figsize=(6, 4))
    pts = [(t, a) for t, a in zip(times, aucs) if a is not None]
    if pts:
        ax.plot(*zip(*pts), marker="o", color="tab:purple")
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("horizon t")
    ax.set_ylabel("IPCW AUC(t)")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("time-dependent AUC")
    _save(fig, path)


def plot_matrix(matrix: np.ndarray, path, title: str, labels=None, vmin=-1.0, vmax=1.0) -> None:
    """Annotated heatmap for head-by-head correlation matrices; NaNs are
    left blank."""
    m = np.asarray(matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(0.6 * m.shape[1] + 2.2, 0.6 * m.shape[0] + 1.8))
    im = ax.imshow(np.ma.masked_invalid(m), vmin=vmin, vmax=vmax, cmap="RdBu_r")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ticks = labels if labels is not None else [f"H{i + 1}" for i in range(m.shape[0])]
    ax.set_xticks(range(m.shape[1]), ticks, fontsize=8)
    ax.set_yticks(range(m.shape[0]), ticks, fontsize=8)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if np.isfinite(m[i, j]):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7)
    ax.set_title(title)
    _save(fig, path)


def plot_attention_grid(grid: np.ndarray, path, head: int) -> None:
    """Spatial attention heatmap for one head; the color scale is pinned to
    rescaled weights in [0, 2] to match the grayscale map export."""
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(np.asarray(grid), vmin=0.0, vmax=2.0, cmap="coolwarm")
    fig.colorbar(im, ax=ax, fraction=0.046, label="rescaled attention")
    ax.set_title(f"head {head + 1} attention")
    ax.set_xlabel("grid col")
    ax.set_ylabel("grid row")
    _save(fig, path)


def plot_cv_folds(fold_cindexes, mean_cindex: float, path, kind: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    x = np.arange(len(fold_cindexes))
    ax.bar(x, fold_cindexes, color="tab:blue", width=0.6)
    ax.axhline(mean_cindex, color="tab:red", ls="--", lw=1.2, label=f"mean {mean_cindex:.3f}")
    ax.set_xticks(x, [f"fold {i}" for i in x])
    ax.set_ylabel("test c-index")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.set_title(f"nested CV ({kind})")
    _save(fig, path)


def plot_ablation(head_counts, means, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(head_counts, means, marker="o", color="tab:green")
    ax.set_xscale("log", base=2)
    ax.set_xticks(list(head_counts), [str(h) for h in head_counts])
    ax.set_xlabel("attention heads")
    ax.set_ylabel("mean test c-index")
    ax.set_title("head-count ablation")
    _save(fig, path)
