"""Figure rendering for the report path. Import is deferred by callers so
headless runs without an output directory never touch matplotlib."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Polygon as MplPolygon
from matplotlib.patches import Wedge


def _draw_box(ax, box, **kwargs) -> None:
    ax.add_patch(MplPolygon(box.corners(), closed=True, fill=False, **kwargs))


def render_scene(world, outcome, path: str | Path) -> None:
    """Top-down overview: ground truth, agents with their FoV, and the first
    ego's detections."""
    fig, ax = plt.subplots(figsize=(7, 7))
    half = world.extent_m / 2.0
    for obj in world.objects:
        _draw_box(ax, obj.box, edgecolor="tab:green", linewidth=1.2)
    for agent in world.agents:
        ax.plot(agent.pose.x, agent.pose.y, marker="^", markersize=9,
                color="tab:blue")
        ax.add_patch(Wedge(
            (agent.pose.x, agent.pose.y), agent.sensing_radius_m,
            np.degrees(agent.pose.yaw - agent.fov_half_rad),
            np.degrees(agent.pose.yaw + agent.fov_half_rad),
            alpha=0.06, color="tab:blue"))
        ax.annotate(str(agent.agent_id), (agent.pose.x, agent.pose.y),
                    textcoords="offset points", xytext=(6, 6), fontsize=9)
    if outcome.frame.egos:
        ego = outcome.frame.egos[0]
        for det in ego.detections:
            _draw_box(ax, det.box, edgecolor="tab:red", linewidth=0.8,
                      linestyle="--", alpha=0.7)
        acc05, acc07 = outcome.mean_acc
        ax.set_title(f"ego {ego.ego_id} detections (dashed) vs ground truth; "
                     f"mean acc@0.5 {acc05:.2f}, @0.7 {acc07:.2f}")
    ax.set_xlim(-half, half)
    ax.set_ylim(-half, half)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_sweep(outcome, path: str | Path) -> None:
    """Mean accuracy curves with one standard deviation over seeds."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.asarray(outcome.values)
    for label, data in (("acc@0.5", outcome.acc_05),
                        ("acc@0.7", outcome.acc_07)):
        mean = data.mean(axis=1)
        std = data.std(axis=1)
        ax.plot(xs, mean, marker="o", label=label)
        ax.fill_between(xs, mean - std, mean + std, alpha=0.15)
    ax.set_xlabel(outcome.axis)
    ax.set_ylabel("accuracy")
    ax.set_title(f"robustness vs {outcome.axis} "
                 f"({outcome.acc_07.shape[1]} seeds)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation(outcome, path: str | Path) -> None:
    """Per-variant mean acc@0.7 bars with seed scatter."""
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(outcome.variants))
    means = outcome.acc_07.mean(axis=1)
    ax.bar(xs, means, yerr=outcome.acc_07.std(axis=1), capsize=4,
           color="tab:blue", alpha=0.8)
    if "full" in outcome.variants:
        ax.axhline(means[outcome.variants.index("full")], color="tab:gray",
                   linestyle=":", linewidth=1)
    ax.set_xticks(xs)
    ax.set_xticklabels(outcome.variants, rotation=20, ha="right")
    ax.set_ylabel("mean acc@0.7")
    ax.set_title(f"ablation over {outcome.acc_07.shape[1]} seeds")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
