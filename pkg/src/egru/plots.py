"""Matplotlib renderings for run reports; files only, no interactive backends."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_event_raster(events, n_units: int, T: float, path, title: str = "") -> None:
    """Raster of internal events (filled) and input events (hollow), amplitude as size."""
    fig, ax = plt.subplots(figsize=(7, 2.2 + 0.25 * n_units))
    for e in events:
        if e.kind == "internal":
            ax.scatter([e.s], [e.unit], s=30 + 60 * abs(e.value), c="C0", zorder=3)
        elif e.component is not None:
            ax.scatter([e.s], [n_units + e.component], s=25, facecolors="none",
                       edgecolors="C3", zorder=3)
    ax.axhline(n_units - 0.5, color="grey", lw=0.5)
    ax.set_xlim(0, T)
    ax.set_xlabel("time")
    ax.set_ylabel("unit / input channel")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(rows, path) -> None:
    """Loss and validation metric over epochs, sparsity when present."""
    epochs = [r["epoch"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, [r["train_loss"] for r in rows], "C0-", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["val_metric"] for r in rows], "C1-", label="val metric")
    alphas = [r["alpha"] for r in rows]
    if not any(np.isnan(a) for a in alphas):
        ax2.plot(epochs, alphas, "C2--", label="activity sparsity")
    ax2.set_ylabel("val metric / sparsity", color="C1")
    ax2.set_ylim(0, 1.05)
    lines, labels = [], []
    for ax in (ax1, ax2):
        ln, lb = ax.get_legend_handles_labels()
        lines += ln
        labels += lb
    ax1.legend(lines, labels, loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_convergence_plot(dts, errors, order: float, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(dts, errors, "o-", label=f"measured (order ~ {order:.2f})")
    ref = errors[0] * (np.asarray(dts) / dts[0])
    ax.loglog(dts, ref, "k--", lw=0.8, label="first order")
    ax.set_xlabel("step size")
    ax.set_ylabel("max |c_discrete - c_continuous|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
