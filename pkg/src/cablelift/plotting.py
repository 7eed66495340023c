"""Static figures for reports (file output only)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _col(rows, key):
    return [float(r[key]) for r in rows]


def plot_timeseries(rows, path, repeat=0) -> Path:
    """Load position against goal, and both tracking errors, over time."""
    rows = [r for r in rows if int(r["repeat"]) == repeat]
    if not rows:
        raise ValueError(f"no rows for repeat {repeat}")
    t = _col(rows, "time")
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    for ax_name, color in zip("xyz", ("C0", "C1", "C2")):
        axes[0].plot(t, _col(rows, f"load_{ax_name}"), color=color, label=f"load {ax_name}")
        axes[0].plot(t, _col(rows, f"goal_{ax_name}"), color=color, ls="--", lw=0.8)
    axes[0].set_ylabel("position [m]")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].plot(t, _col(rows, "pos_error"), color="k")
    axes[1].axhline(0.10, color="grey", ls=":", lw=0.8)
    axes[1].set_ylabel("position error [m]")
    axes[2].plot(t, _col(rows, "att_error_deg"), color="k")
    axes[2].axhline(10.0, color="grey", ls=":", lw=0.8)
    axes[2].set_ylabel("attitude error [deg]")
    axes[2].set_xlabel("time [s]")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(curves: dict[str, list[dict]], path, key="mean_episode_reward") -> Path:
    """One line per run of ``key`` against environment steps."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, rows in curves.items():
        pts = [(float(r["env_steps"]), float(r[key])) for r in rows if not math.isnan(float(r[key]))]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(key.replace("_", " "))
    if ax.get_lines():
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
