"""Figure rendering for the CLI report paths.

Every plot lands next to the delimited output it illustrates. PNGs are
written without embedded timestamps so repeated runs stay byte-stable.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .container import atomic_write_bytes

_SAVE_KW = {"dpi": 130, "format": "png", "metadata": {"Date": None}}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, **_SAVE_KW)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def save_training_curves(records, path) -> Path:
    """Loss and age-MSE trajectories from a list of TrainRecord."""
    path = Path(path)
    epochs = [r.epoch for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(epochs, [r.loss for r in records], lw=1.2)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[1].plot(epochs, [r.age_mse for r in records], lw=1.2, color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("age MSE (normalized)")
    axes[1].set_yscale("log")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def save_mae_bars(reports: dict, path) -> Path:
    """Grouped per-age-bin MAE bars; `reports` maps label -> EvalReport."""
    path = Path(path)
    labels = [b.label for b in next(iter(reports.values())).per_bin]
    x = np.arange(len(labels))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for i, (name, rep) in enumerate(reports.items()):
        vals = [b.mae if b.mae is not None else 0.0 for b in rep.per_bin]
        ax.bar(x + i * width, vals, width, label=f"{name} (all: {rep.overall_mae:.2f} y)")
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_xlabel("age range (years)")
    ax.set_ylabel("MAE (years)")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    return _save(fig, path)


def save_volume_slices(vol, path, title: str = "", diverging: bool = False) -> Path:
    """Mid-plane axial/coronal/sagittal slices of a Volume.

    Jacobian-determinant maps use a diverging map centered at 1 so
    expansion (> 1) and contraction (< 1) read at a glance.
    """
    path = Path(path)
    data = vol.data
    nx, ny, nz = data.shape
    slices = [data[nx // 2, :, :], data[:, ny // 2, :], data[:, :, nz // 2]]
    names = ["sagittal", "coronal", "axial"]
    if diverging:
        amp = max(abs(float(data.min()) - 1.0), abs(float(data.max()) - 1.0), 1e-6)
        kw = {"cmap": "coolwarm", "vmin": 1.0 - amp, "vmax": 1.0 + amp}
    else:
        kw = {"cmap": "gray"}
    fig, axes = plt.subplots(1, 3, figsize=(9.5, 3.4))
    for ax, sl, name in zip(axes, slices, names):
        im = ax.imshow(sl.T, origin="lower", **kw)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.85)
    if title:
        fig.suptitle(title)
    return _save(fig, path)
