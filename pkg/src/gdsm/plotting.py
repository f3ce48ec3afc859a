"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PLANE_ORDER = ("axial", "coronal", "sagittal")
STREAM_STYLE = {
    "global": dict(color="tab:blue", marker="o", ls="-"),
    "correction": dict(color="tab:green", marker="s", ls="-"),
    "local": dict(color="tab:red", marker="^", ls="none"),
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "figure.dpi": 120,
}
# keeps re-rendered PNGs byte-identical
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_per_slice(rows: Sequence[dict], path) -> Path:
    """One panel per plane: predictor MAE against slice index, grouped by stream."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3), sharey=True)
        for ax, plane in zip(axes, PLANE_ORDER):
            for stream, style in STREAM_STYLE.items():
                pts = sorted((r["slice_index"], r["mae"]) for r in rows
                             if r["plane"] == plane and r["stream"] == stream)
                if pts:
                    x, y = zip(*pts)
                    ax.plot(x, y, label=stream, ms=4, **style)
            ax.set_title(plane)
            ax.set_xlabel("slice index")
        axes[0].set_ylabel("MAE (years)")
        handles, labels = axes[0].get_legend_handles_labels()
        for ax in axes[1:]:
            h, l = ax.get_legend_handles_labels()
            for hh, ll in zip(h, l):
                if ll not in labels:
                    handles.append(hh)
                    labels.append(ll)
        if handles:
            fig.legend(handles, labels, loc="upper right", frameon=False)
        return _save(fig, path)


def plot_predictions(pred, actual, path, title: str = "") -> Path:
    pred, actual = np.asarray(pred), np.asarray(actual)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.scatter(actual, pred, s=12, color="tab:blue", alpha=0.8)
        lo = float(min(actual.min(), pred.min()))
        hi = float(max(actual.max(), pred.max()))
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=1, ls="--")
        ax.set_xlabel("chronological age (years)")
        ax.set_ylabel("predicted age (years)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_history(epochs: Sequence[dict], path, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        ep = [e["epoch"] for e in epochs]
        ax.plot(ep, [e["train_mae"] for e in epochs], label="train", color="tab:blue")
        val = [e["val_mae"] for e in epochs]
        if any(v is not None for v in val):
            ax.plot(ep, val, label="validation", color="tab:orange")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE (years)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
