"""Static figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {"InitialVelocity": "initial velocity", "FrictionLoss": "friction loss",
          "TargetSpeed": "target speed"}


def plot_sweep(summary: Sequence[dict], path: Path, title: str = "") -> Path:
    """Success rate vs the swept value: all episodes on the left, solvable ones on the right."""
    modes = sorted({s["mode"] for s in summary})
    param = summary[0]["param"] if summary else ""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, key, name in ((axes[0], "success_all", "all episodes"),
                          (axes[1], "success_solvable", "solvable episodes")):
        for m in modes:
            pts = [s for s in summary if s["mode"] == m and s[f"{key}_mean"] is not None]
            x = np.array([s["value"] for s in pts])
            y = np.array([s[f"{key}_mean"] for s in pts])
            e = np.array([s[f"{key}_std"] for s in pts])
            ax.errorbar(x, y, yerr=e, marker="o", ms=4, capsize=3, label=m)
        ax.set_title(name)
        ax.set_xlabel(LABELS.get(param, param))
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("success rate")
    axes[1].legend(loc="lower left", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_losses(metrics: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, m in sorted(metrics.items()):
        if m.get("losses"):
            ax.semilogy(np.arange(1, len(m["losses"]) + 1), m["losses"], marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_trace(trace: Sequence[dict], path: Path, table=None) -> Path:
    """Ball and end-effector paths of one episode with the re-planned goals marked."""
    bx = [r["ball_x"] for r in trace]
    by = [r["ball_y"] for r in trace]
    ex = [r["ee_x"] for r in trace]
    ey = [r["ee_y"] for r in trace]
    gx = [r["gtilde_x"] for r in trace if r["replanned_flag"]]
    gy = [r["gtilde_y"] for r in trace if r["replanned_flag"]]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if table is not None:
        hw, hh = table.half_width, table.half_height
        ax.plot([-hw, hw, hw, -hw, -hw], [-hh, -hh, hh, hh, -hh], color="k", lw=1)
        for p in table.pocket_centers:
            ax.add_patch(plt.Circle((p.x, p.y), table.pocket_radius, color="0.6"))
    ax.plot(bx, by, lw=1, label="ball")
    ax.plot(ex, ey, lw=1, label="end effector")
    if gx:
        ax.scatter(gx, gy, marker="x", color="C3", zorder=3, label="re-planned goal")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.set_title(trace[-1]["outcome"] if trace else "")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
