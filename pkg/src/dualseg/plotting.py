"""Figures for training logs, ablation tables and segmentation overlays (file output only)."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

LOSS_KEYS = ("L_sup", "L_intra", "L_inter", "L_LCont", "L_NCont")


def figsize(scale=1.0, ratio=None):
    width = 6.4 * scale
    ratio = (math.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _column(history, key):
    return np.array([float(r[key]) for r in history], dtype=np.float64)


def loss_curves(history, path, title=None):
    """One panel per loss component against training step; NaN rows are skipped."""
    steps = _column(history, "step")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(LOSS_KEYS), figsize=figsize(1.6, 0.22))
        for ax, key in zip(axes, LOSS_KEYS):
            y = _column(history, key)
            ok = np.isfinite(y)
            ax.plot(steps[ok], y[ok], color="C0")
            ax.set_title(key)
            ax.set_xlabel("step")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def distance_curve(history, path):
    steps = _column(history, "step")
    d = _column(history, "param_distance")
    val = _column(history, "val_DSC")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ax.plot(steps, d, color="C3")
        ax.set_xlabel("step")
        ax.set_ylabel(r"$\sum_i |\theta_1^i - \theta_2^i|$")
        ok = np.isfinite(val)
        if ok.any():
            ax2 = ax.twinx()
            ax2.plot(steps[ok], val[ok], "o-", color="C0", ms=3)
            ax2.set_ylabel("validation DSC")
            ax2.spines["right"].set_visible(True)
        return _save(fig, path)


def ablation_bars(rows, path, metric="dsc"):
    """Bar chart of ``rows`` (dicts with name, <metric>_mean, <metric>_std)."""
    names = [r["name"] for r in rows]
    mean = np.array([r[f"{metric}_mean"] for r in rows], dtype=float)
    std = np.array([r[f"{metric}_std"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0))
        x = np.arange(len(rows))
        ax.bar(x, mean, yerr=std, capsize=3, color="0.6", edgecolor="k", linewidth=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("DSC" if metric == "dsc" else "95HD (voxels)")
        return _save(fig, path)


def slice_overlay(volume, path, truth=None, pred=None, axis=2, index=None):
    """Mid-slice with truth (green) and prediction (red) contours."""
    data = np.asarray(getattr(volume, "data", volume))
    if index is None:
        ref = truth if truth is not None else pred
        if ref is not None and np.asarray(getattr(ref, "data", ref)).any():
            # slice through the most foreground voxels
            m = np.asarray(getattr(ref, "data", ref))
            other = tuple(a for a in range(3) if a != axis)
            index = int(np.argmax(m.sum(axis=other)))
        else:
            index = data.shape[axis] // 2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(np.take(data, index, axis=axis).T, cmap="gray", origin="lower", vmin=0, vmax=1)
        for m, colour in ((truth, "lime"), (pred, "red")):
            if m is None:
                continue
            sl = np.take(np.asarray(getattr(m, "data", m)), index, axis=axis).T
            if sl.any():
                ax.contour(sl, levels=[0.5], colors=colour, linewidths=0.8)
        ax.set_axis_off()
        ax.set_title(f"axis {axis}, slice {index}")
        return _save(fig, path)
