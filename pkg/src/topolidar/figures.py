"""Headless figure rendering for reports and training logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .homology import PersistenceDiagram
from .metrics import OccupancyHistogram
from .rangeimage import RangeImage


def save_range_image_figure(path: str | Path, img: RangeImage, title: str = "range image") -> None:
    fig, ax = plt.subplots(figsize=(10, 2.2))
    shown = np.ma.masked_where(~img.occupancy(), img.plane)
    ax.imshow(shown, cmap="viridis", aspect="auto", interpolation="nearest", vmin=0.0, vmax=1.0)
    ax.set_title(title)
    ax.set_xlabel("azimuth bin")
    ax.set_ylabel("ring")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bev_figure(path: str | Path, hists: dict[str, OccupancyHistogram]) -> None:
    """Side-by-side bird's-eye heatmaps (log mass so sparse cells stay visible)."""
    fig, axes = plt.subplots(1, len(hists), figsize=(4.2 * len(hists), 4), squeeze=False)
    for ax, (name, hist) in zip(axes[0], hists.items()):
        ext = hist.grid.extent
        ax.imshow(
            np.log10(hist.probs.T + 1e-9),
            origin="lower",
            extent=(-ext, ext, -ext, ext),
            cmap="magma",
        )
        ax.set_title(name)
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(path: str | Path, history: list[dict], keys: tuple[str, ...]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row["step"] for row in history]
    for key in keys:
        if history and key in history[0]:
            ax.plot(steps, [row[key] for row in history], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_diagram_figure(path: str | Path, diagram: PersistenceDiagram) -> None:
    """Birth/death scatter; the essential pair is drawn on the top border."""
    finite = diagram.finite()
    deaths = [p.death for p in finite]
    ceiling = 1.1 * max(deaths, default=1.0)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, ceiling], [0, ceiling], color="gray", linewidth=0.8)
    ax.scatter([p.birth for p in finite], deaths, s=12, label="finite pairs")
    essential = [p for p in diagram.pairs if np.isinf(p.death)]
    if essential:
        ax.scatter([p.birth for p in essential], [ceiling] * len(essential), marker="^", label="essential")
    ax.set_xlim(-0.05 * ceiling, ceiling)
    ax.set_ylim(-0.05 * ceiling, ceiling * 1.05)
    ax.set_xlabel("birth")
    ax.set_ylabel("death")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
