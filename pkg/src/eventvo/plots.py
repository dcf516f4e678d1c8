"""Figure rendering for the report paths of the CLI.

All functions write PNG files next to the delimited output; nothing is shown
interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_error_timeline(report, path) -> Path:
    """Longitudinal/lateral/planar error against time."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 4))
    t = report.timestamps
    ax.plot(t, report.planar, label="planar", color="tab:red")
    ax.plot(t, report.longitudinal, label="longitudinal", color="tab:blue", alpha=0.8)
    ax.plot(t, report.lateral, label="lateral", color="tab:green", alpha=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("position error [m]")
    ax.legend(loc="upper left")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_trajectory_topdown(est_xy: np.ndarray, gt_xy: np.ndarray, path) -> Path:
    """Top-down view of the aligned estimate over the ground truth."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt_xy[:, 0], gt_xy[:, 1], label="ground truth", color="tab:blue")
    ax.plot(est_xy[:, 0], est_xy[:, 1], label="estimate", color="tab:green", ls="--")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_lifetime_histogram(histogram: dict[int, int], path) -> Path:
    """Distribution of feature lifetimes in frames."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    if histogram:
        xs = sorted(histogram)
        ax.bar(xs, [histogram[x] for x in xs], width=0.9, color="tab:blue")
    ax.set_xlabel("lifetime [frames]")
    ax.set_ylabel("feature count")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
