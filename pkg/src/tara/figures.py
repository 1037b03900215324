"""Matplotlib renderings of the delimited reports.

Every function takes an already-computed report object and a target path,
draws one PNG, and closes the figure. Nothing here recomputes statistics;
the CSV emitters in `analysis` stay the source of record and these files
are the human-readable view written next to them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import InterferenceReport, TokenAttentionSummary, TokenInfluenceReport
from .training import TrainLog

_META = {"Software": "tara"}  # pinned so reruns produce identical metadata


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def loss_curves(log: TrainLog, path: str | Path) -> None:
    """Denoise / align / total loss per step, log scale where positive."""
    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    if log.rows:
        steps = [r[0] for r in log.rows]
        ax.plot(steps, [r[1] for r in log.rows], label="denoise", lw=1.2)
        if any(r[2] > 0 for r in log.rows):
            ax.plot(steps, [r[2] for r in log.rows], label="align", lw=1.2)
        ax.plot(steps, [r[3] for r in log.rows], label="total", lw=1.2, ls="--")
        if all(r[3] > 0 for r in log.rows):
            ax.set_yscale("log")
        ax.legend(frameon=False)
    else:
        ax.text(0.5, 0.5, "no training steps", ha="center", va="center")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    _save(fig, path)


def influence_bars(
    report: TokenInfluenceReport,
    path: str | Path,
    labels: list[str] | None = None,
) -> None:
    """Per-token adapter output magnitude, one panel per concept."""
    concepts = report.concepts
    fig, axes = plt.subplots(
        1, max(1, len(concepts)), figsize=(3.4 * max(1, len(concepts)), 3.0),
        squeeze=False,
    )
    x = np.arange(report.n_tokens)
    width = 0.38
    for ax, concept in zip(axes[0], concepts):
        for off, proj in ((-width / 2, "K"), (width / 2, "V")):
            vals = [report.magnitude(concept, proj, j) for j in range(report.n_tokens)]
            ax.bar(x + off, vals, width, label=proj)
        ax.set_title(concept)
        ax.set_xticks(x)
        ax.set_xticklabels(labels or [str(j) for j in x], rotation=45, ha="right")
        ax.set_ylabel("mean column L2")
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def attention_grids(
    summary: TokenAttentionSummary,
    g: int,
    path: str | Path,
    labels: dict[int, str] | None = None,
) -> None:
    """Aggregated per-token attention mass, one g x g heatmap per position."""
    positions = summary.positions
    fig, axes = plt.subplots(
        1, max(1, len(positions)), figsize=(2.6 * max(1, len(positions)), 2.9),
        squeeze=False,
    )
    for ax, pos in zip(axes[0], positions):
        grid = summary.vector(pos).reshape(g, g)
        im = ax.imshow(grid, cmap="viridis", vmin=0.0)
        name = (labels or {}).get(pos, f"token {pos}")
        ax.set_title(f"{name}\nentropy {summary.entropy(pos):.2f}", fontsize=9)
        ax.set_xticks(())
        ax.set_yticks(())
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def interference_bars(reports: list[InterferenceReport], path: str | Path) -> None:
    """Per-concept region MSE, grouped by method, with method means."""
    concepts = sorted({c for rep in reports for c in rep.region_mse})
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(concepts), 3.2))
    x = np.arange(len(concepts))
    width = 0.8 / max(1, len(reports))
    for i, rep in enumerate(reports):
        vals = [rep.region_mse.get(c, 0.0) for c in concepts]
        bars = ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width,
                      label=f"{rep.method} (mean {rep.mean():.3f})")
        for b in bars:
            b.set_edgecolor("black")
            b.set_linewidth(0.4)
    ax.set_xticks(x)
    ax.set_xticklabels(concepts)
    ax.set_ylabel("solo vs composed region MSE")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
