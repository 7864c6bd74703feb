"""Figure rendering for training and evaluation reports.

Every report path that writes a delimited file also drops a PNG next to
it: loss curves for training runs, AP-versus-threshold for evaluations.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_loss_curve(epochs, totals, components: dict[str, list[float]],
                    path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, totals, label="total", color="black", lw=2)
    for name, values in components.items():
        ax.plot(epochs, values, label=name, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_map_curve(thresholds, map_values, average_map: float,
                   path: str | Path, per_class: dict[str, list[float]] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if per_class:
        for name, vals in sorted(per_class.items()):
            ax.plot(thresholds, vals, alpha=0.4, lw=1, label=name)
    ax.plot(thresholds, map_values, marker="o", color="black", lw=2, label="mAP")
    ax.axhline(average_map, color="grey", ls="--", lw=1,
               label=f"avg {average_map:.3f}")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.05)
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
