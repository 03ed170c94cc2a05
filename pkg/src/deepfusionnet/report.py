"""Training-curve figures rendered from an epoch log.

Kept separate from the training loop so importing the library never pulls
in matplotlib; only the report path pays that cost.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .train import EpochLog


def _plottable(values):
    # matplotlib cannot place infinities; show them as gaps
    return [v if math.isfinite(v) else float("nan") for v in values]


def _curve_figure(log: EpochLog, columns, ylabel, title, path) -> None:
    epochs = [int(r.split(",", 1)[0]) for r in log.rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for column, label in columns:
        ax.plot(epochs, _plottable(log.series(column)), label=label, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_report(log: EpochLog, out_dir) -> list:
    """Write loss, psnr, and ssim curve PNGs; returns the written paths."""
    if not log.rows:
        raise ValueError("metrics log has no rows to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    specs = [
        ("loss_curves.png", [("train_hybrid", "train"), ("val_hybrid", "val")],
         "hybrid loss", "training objective"),
        ("psnr_curves.png", [("train_psnr", "train"), ("val_psnr", "val")],
         "psnr (dB)", "peak signal-to-noise ratio"),
        ("ssim_curves.png", [("train_ssim", "train"), ("val_ssim", "val")],
         "ssim", "structural similarity"),
    ]
    for name, columns, ylabel, title in specs:
        path = out / name
        _curve_figure(log, columns, ylabel, title, path)
        written.append(path)
    return written
