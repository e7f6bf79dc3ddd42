"""Figures written next to the TSV outputs (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    fig.clf()
    return path


def training_curves(report, path) -> Path:
    plt = _pyplot()
    epochs = [r.epoch for r in report.records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(epochs, [r.loss.total for r in report.records], label="total")
    axes[0].plot(epochs, [r.loss.area for r in report.records], label="area")
    if any(r.loss.edge for r in report.records):
        axes[0].plot(epochs, [r.loss.edge for r in report.records], label="edge")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[0].legend(frameon=False)
    axes[1].plot(epochs, [r.val.dsc for r in report.records], color="C2")
    axes[1].set_ylim(0, 1)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation DSC")
    axes[2].plot(epochs, report.lr_trace, color="C3")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("learning rate")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def prediction_grid(slices, probs: np.ndarray, path, limit: int = 6) -> Path:
    """Rows of image / mask / predicted mask / edge label."""
    plt = _pyplot()
    n = min(limit, len(slices))
    fig, axes = plt.subplots(n, 4, figsize=(8, 2 * n), squeeze=False)
    titles = ("image", "mask", "prediction", "edge label")
    for i in range(n):
        panels = (slices[i].image, slices[i].mask, probs[i, 0] > 0.5, slices[i].edge)
        for j, (ax, img) in enumerate(zip(axes[i], panels)):
            ax.imshow(img, cmap="gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
        axes[i, 0].set_ylabel(slices[i].id, fontsize=7)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def parameter_bars(groups: dict[str, int], path, reference: float | None = None) -> Path:
    plt = _pyplot()
    names = list(groups)
    vals = np.array([groups[k] for k in names]) / 1e6
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(names, vals, color="C0")
    ax.set_ylabel("parameters (M)")
    total = vals.sum()
    label = f"total {total:.2f}M" + (f" (reference {reference / 1e6:.0f}M)" if reference else "")
    ax.set_title(label, fontsize=10)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def bench_plot(rows: list[dict], path) -> Path:
    plt = _pyplot()
    lengths = [r["length"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.loglog(lengths, [r["scan_s"] for r in rows], "o-", label="recurrent scan")
    ax.loglog(lengths, [r["kernel_s"] for r in rows], "s-", label="kernel + convolution")
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("seconds")
    ax.legend(frameon=False)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out
