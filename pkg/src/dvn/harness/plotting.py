"""SVG figures for threshold sweeps and detector comparisons.

Every figure is written next to the CSV it was drawn from; nothing downstream
reads the SVG back.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so reruns produce identical files
matplotlib.rcParams["svg.hashsalt"] = "dvn"
matplotlib.rcParams["svg.fonttype"] = "none"
_META = {"Date": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_threshold_sweep(path, deltas, id_tpr, ood_fpr: dict) -> None:
    """FPR of each negative set against delta, with ID TPR on the right axis."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    deltas = np.asarray(deltas, dtype=np.float64)
    for name, fpr in ood_fpr.items():
        ax.plot(deltas, fpr, label=f"FPR {name}")
    ax.set_xlabel(r"threshold $\delta$ (nats)")
    ax.set_ylabel("FPR (negatives)")
    ax.set_ylim(-0.02, 1.02)
    right = ax.twinx()
    right.plot(deltas, id_tpr, "r--", label="TPR in-distribution")
    right.set_ylabel("TPR (in-distribution)", color="r")
    right.set_ylim(-0.02, 1.02)
    lines = ax.get_lines() + right.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center left", fontsize=8)
    _save(fig, path)


def plot_detector_overlay(path, curves: dict) -> None:
    """ROC (left) and precision-recall (right) for each detector.

    ``curves[name] = {"fpr", "tpr", "recall", "precision"}``.
    """
    fig, (roc, pr) = plt.subplots(1, 2, figsize=(9.0, 3.8))
    for name, c in curves.items():
        roc.plot(c["fpr"], c["tpr"], label=name)
        pr.plot(c["recall"], c["precision"], label=name)
    roc.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls=":")
    roc.set_xlabel("false positive rate")
    roc.set_ylabel("true positive rate")
    pr.set_xlabel("recall (in-distribution)")
    pr.set_ylabel("precision")
    for ax in (roc, pr):
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_training_curves(path, log_rows) -> None:
    epochs = [r["epoch"] for r in log_rows]
    fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.2))
    for ax, key in zip(axes, ("total", "mi", "dz_acc")):
        ax.plot(epochs, [r[key] for r in log_rows])
        ax.set_xlabel("epoch")
        ax.set_title(key)
    _save(fig, path)
