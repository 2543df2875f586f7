"""SVG line charts for benchmark sweeps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .benchkit import CostReport  # noqa: E402

AXIS_LABELS = {"granularity": "person cube resolution (voxels per side)",
               "persons": "persons in scene", "cameras": "cameras"}


def plot_sweep(report: CostReport, sweep: str, path) -> Path | None:
    """One line per stage; returns the written path, or None when the sweep is absent."""
    pts = [p for p in report.points if p.sweep == sweep]
    if not pts:
        return None
    stages = sorted({s for p in pts for s in p.stage_ms})
    plt.rcParams["svg.hashsalt"] = "orthovox"
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in stages:
        xs, ys = report.series(sweep, stage)
        ax.plot(xs, ys, marker="o", label=stage)
    ax.set_xlabel(AXIS_LABELS.get(sweep, sweep))
    ax.set_ylabel("best time (ms)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
