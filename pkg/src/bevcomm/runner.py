"""Scenario orchestration: single runs, robustness sweeps, and ablations.

Reports are deterministic for a fixed config and seed: the JSON artifact
contains no timing, thread-dependent, or platform-dependent values, so two
runs produce byte-identical files no matter how many workers execute the
per-ego stage. Wall-clock time appears only in the CSV tables.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import detect, objective
from .comm import BudgetLedger
from .config import (VARIANTS, ConfigError, ExperimentConfig, override,
                     to_mapping)
from .objective import MetricsReport, evaluate
from .pipeline import (BudgetExceededError, FrameResult, PipelineParams,
                       run_frame)
from .scene import generate_world, yaw_bin_of

THREADS_ENV = "BEVCOMM_THREADS"
SWEEP_AXES = ("latency", "pose", "ratio")

_BIN_LABELS = ("0_30", "30_50", "50_100")
_COUNT_COLUMNS = tuple(f"{kind}_{b}" for b in _BIN_LABELS
                       for kind in ("tp", "fp", "fn"))


def resolve_threads(explicit: int | None = None) -> int:
    """Worker count: explicit argument, then the environment, then all cores."""
    if explicit is not None:
        if explicit < 1:
            raise ConfigError(f"thread count must be >= 1, got {explicit}")
        return explicit
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            value = 0
        if value < 1:
            raise ConfigError(
                f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return value
    return os.cpu_count() or 1


def _ego_map(threads: int):
    if threads <= 1:
        return map

    def mapper(fn, items):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return mapper


def build_params(cfg: ExperimentConfig) -> PipelineParams:
    """Module weights per the configured mode."""
    channels = cfg.world.signature_dim + 2
    image_channels = cfg.world.signature_dim
    if cfg.pipeline.weights == "oracle":
        return PipelineParams.oracle(channels, cfg.grid.levels, image_channels,
                                     sharpen_sigma_m=cfg.pipeline.sharpen_sigma_m)
    if cfg.pipeline.weights == "seeded":
        return PipelineParams.seeded(channels, cfg.grid.levels, image_channels,
                                     seed=cfg.pipeline.weight_seed)
    return PipelineParams.neutral(channels, cfg.grid.levels, image_channels)


@dataclass(frozen=True, eq=False)
class ScenarioOutcome:
    """One frame's results plus everything the report needs."""

    config: ExperimentConfig
    frame: FrameResult
    metrics: dict[int, MetricsReport]
    ego_losses: dict[int, dict[str, float]]
    depth_loss: float
    ledger: BudgetLedger
    wall_ms: float

    @property
    def mean_acc(self) -> tuple[float, float]:
        m = list(self.metrics.values())
        return (float(np.mean([r.acc_05 for r in m])),
                float(np.mean([r.acc_07 for r in m])))

    def count_totals(self) -> dict[str, int]:
        """TP/FP/FN summed over egos, keyed by CSV column name."""
        out = dict.fromkeys(_COUNT_COLUMNS, 0)
        for report in self.metrics.values():
            for i, label in enumerate(_BIN_LABELS):
                out[f"tp_{label}"] += int(report.table.tp[i])
                out[f"fp_{label}"] += int(report.table.fp[i])
                out[f"fn_{label}"] += int(report.table.fn[i])
        return out

    def report(self) -> dict:
        """Deterministic report document (no timing)."""
        acc05, acc07 = self.mean_acc
        links = {f"{s}->{r}": units
                 for (s, r), units in sorted(self.ledger.link_units().items())}
        egos = []
        for res in self.frame.egos:
            entry = self.metrics[res.ego_id].as_dict()
            entry["id"] = res.ego_id
            entry["neighbors"] = list(res.neighbor_ids)
            entry["losses"] = self.ego_losses[res.ego_id]
            egos.append(entry)
        return {
            "config": to_mapping(self.config),
            "variant": self.config.pipeline.variant,
            "mean": {"acc_0.5": acc05, "acc_0.7": acc07},
            "egos": egos,
            "losses": {"depth": self.depth_loss},
            "comm": {
                "total_bytes": self.ledger.total_bytes,
                "total_units": self.ledger.units,
                "links": links,
            },
        }

    def report_text(self) -> str:
        return json.dumps(self.report(), sort_keys=True, indent=2) + "\n"


def _ego_loss_entries(world, cfg, params, result) -> dict[str, float]:
    gt = world.boxes_at(0)
    spec = detect.lattice_spec(result.fused, params.anchors)
    anchors = detect.make_anchors(spec, params.anchors,
                                  _agent_pose(world, result.ego_id))
    labels, matched = detect.assign_targets(anchors, gt, params.anchors)
    class_prob = result.scores.values.reshape(-1)
    bins = result.scores.values.shape[2]
    per_cell = result.scores.values.reshape(-1, bins)
    p1 = per_cell[:, 1] / np.maximum(per_cell.sum(axis=1), 1e-12) \
        if bins == 2 else np.full(len(per_cell), 0.5)
    dir_prob = np.repeat(p1, bins)
    dir_labels = np.zeros(len(anchors), dtype=np.int64)
    for i, m in enumerate(matched):
        if m >= 0:
            dir_labels[i] = yaw_bin_of(gt[m].yaw)
    det_loss = objective.detection_loss(class_prob, dir_prob, labels, dir_labels)
    uac = objective.uac_loss(list(result.uac_inputs))
    return {
        "detection_cls": det_loss.classification,
        "detection_dir": det_loss.direction,
        "detection_total": det_loss.total,
        "uac": uac,
    }


def _agent_pose(world, agent_id):
    for agent in world.agents:
        if agent.agent_id == agent_id:
            return agent.pose
    raise KeyError(agent_id)


def run_scenario(cfg: ExperimentConfig, *, threads: int | None = None,
                 out_dir: str | Path | None = None, losses: bool = True,
                 figures: bool = False) -> ScenarioOutcome:
    """Simulate one frame for every ego and assemble the report."""
    start = time.perf_counter()
    threads = resolve_threads(threads)
    world = generate_world(cfg.world, cfg.seed)
    params = build_params(cfg)
    frame = run_frame(world, cfg, params, t_ms=0, ego_map=_ego_map(threads))

    ledger = BudgetLedger()
    for result in frame.egos:
        for sender, receiver, nbytes in result.traffic:
            ledger.account(0, sender, receiver, nbytes)
    cap = cfg.comm.budget_units
    if cap is not None:
        for (sender, receiver), units in sorted(ledger.link_units().items()):
            if units > cap:
                raise BudgetExceededError(
                    f"link {sender}->{receiver} used {units:.4f} units, "
                    f"cap is {cap}")

    gt = world.boxes_at(0)
    metrics = {}
    ego_losses = {}
    for result in frame.egos:
        pose = _agent_pose(world, result.ego_id)
        metrics[result.ego_id] = evaluate(result.detections, gt,
                                          (pose.x, pose.y))
        ego_losses[result.ego_id] = _ego_loss_entries(world, cfg, params,
                                                      result) if losses else {}
    depth = float(np.mean([
        objective.depth_loss(p.polar.depth_logits(), p.polar.depth_label)
        for p in frame.products.values()])) if losses else 0.0

    outcome = ScenarioOutcome(cfg, frame, metrics, ego_losses, depth, ledger,
                              (time.perf_counter() - start) * 1000.0)
    if out_dir is not None:
        _write_scenario(outcome, Path(out_dir), world, figures)
    return outcome


def _write_scenario(outcome: ScenarioOutcome, out_dir: Path, world,
                    figures: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(outcome.report_text())
    acc05, acc07 = outcome.mean_acc
    row = {"variant": outcome.config.pipeline.variant,
           "acc_0.5": repr(acc05), "acc_0.7": repr(acc07),
           **{k: v for k, v in outcome.count_totals().items()},
           "comm_units": repr(outcome.ledger.units),
           "wall_ms": f"{outcome.wall_ms:.1f}"}
    _write_csv(out_dir / "metrics.csv", ["variant"], [row])
    if figures:
        from . import figures as fig
        fig.render_scene(world, outcome, out_dir / "scene.png")


def _write_csv(path: Path, head: list[str], rows: list[dict]) -> None:
    columns = head + ["acc_0.5", "acc_0.7", *_COUNT_COLUMNS,
                      "comm_units", "wall_ms"]
    extra = [c for c in rows[0] if c not in columns] if rows else []
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns + extra)
        writer.writeheader()
        writer.writerows(rows)


@dataclass(frozen=True, eq=False)
class SweepOutcome:
    """Per-value, per-seed accuracies for one swept axis."""

    axis: str
    values: tuple[float, ...]
    acc_05: np.ndarray      # (num_values, num_seeds)
    acc_07: np.ndarray
    comm_units: np.ndarray  # (num_values,) mean over seeds
    rows: list[dict]

    def mean_acc_07(self) -> np.ndarray:
        return self.acc_07.mean(axis=1)


_AXIS_PATHS = {
    "latency": ("channel.latency_ms",),
    "pose": ("channel.sigma_xy_m", "channel.sigma_yaw_rad"),
    "ratio": ("comm.ratio",),
}


def sweep_values(cfg: ExperimentConfig, axis: str) -> tuple[float, ...]:
    if axis == "latency":
        return cfg.sweep.latencies
    if axis == "pose":
        return cfg.sweep.pose_sigmas
    if axis == "ratio":
        return cfg.sweep.ratios
    raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}; got {axis!r}")


def run_sweep(cfg: ExperimentConfig, axis: str,
              values: list[float] | None = None, *,
              num_seeds: int | None = None, threads: int | None = None,
              out_dir: str | Path | None = None,
              figures: bool = False) -> SweepOutcome:
    """One scenario per (value, seed) with all other settings fixed.

    Seeds are paired across values: value v with seed index s reuses the
    exact same world as every other value with that index, so the curves
    differ only through the swept setting.
    """
    if values is None:
        values = list(sweep_values(cfg, axis))
    if axis not in _AXIS_PATHS:
        raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}; got {axis!r}")
    if not values:
        raise ConfigError("sweep values must not be empty")
    seeds = cfg.sweep.num_seeds if num_seeds is None else num_seeds
    if seeds < 1:
        raise ConfigError(f"num_seeds must be >= 1, got {seeds}")

    acc05 = np.zeros((len(values), seeds))
    acc07 = np.zeros((len(values), seeds))
    units = np.zeros((len(values), seeds))
    rows = []
    for vi, value in enumerate(values):
        counts = dict.fromkeys(_COUNT_COLUMNS, 0)
        wall = 0.0
        for si in range(seeds):
            assignments = {path: value for path in _AXIS_PATHS[axis]}
            assignments["seed"] = cfg.seed + si
            run_cfg = override(cfg, assignments)
            outcome = run_scenario(run_cfg, threads=threads, losses=False)
            a05, a07 = outcome.mean_acc
            acc05[vi, si] = a05
            acc07[vi, si] = a07
            units[vi, si] = outcome.ledger.units
            for key, n in outcome.count_totals().items():
                counts[key] += n
            wall += outcome.wall_ms
        rows.append({axis: repr(float(value)),
                     "acc_0.5": repr(float(acc05[vi].mean())),
                     "acc_0.7": repr(float(acc07[vi].mean())),
                     **{k: v for k, v in counts.items()},
                     "comm_units": repr(float(units[vi].mean())),
                     "wall_ms": f"{wall:.1f}"})
    outcome = SweepOutcome(axis, tuple(float(v) for v in values), acc05, acc07,
                           units.mean(axis=1), rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / f"sweep_{axis}.csv", [axis], rows)
        if figures:
            from . import figures as fig
            fig.render_sweep(outcome, out / f"sweep_{axis}.png")
    return outcome


@dataclass(frozen=True, eq=False)
class AblationOutcome:
    """Per-variant, per-seed accuracies over identical worlds."""

    variants: tuple[str, ...]
    acc_05: np.ndarray  # (num_variants, num_seeds)
    acc_07: np.ndarray
    rows: list[dict]

    def mean_acc_07(self) -> dict[str, float]:
        return {v: float(self.acc_07[i].mean())
                for i, v in enumerate(self.variants)}


def run_ablation(cfg: ExperimentConfig, variants: list[str] | None = None, *,
                 num_seeds: int | None = None, threads: int | None = None,
                 out_dir: str | Path | None = None,
                 figures: bool = False) -> AblationOutcome:
    """Compare pipeline variants over identical seeds; deltas are vs. full."""
    if variants is None:
        variants = list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(
            f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    seeds = cfg.sweep.num_seeds if num_seeds is None else num_seeds
    if seeds < 1:
        raise ConfigError(f"num_seeds must be >= 1, got {seeds}")

    acc05 = np.zeros((len(variants), seeds))
    acc07 = np.zeros((len(variants), seeds))
    rows = []
    stats = []
    for vi, variant in enumerate(variants):
        counts = dict.fromkeys(_COUNT_COLUMNS, 0)
        wall, units = 0.0, 0.0
        for si in range(seeds):
            run_cfg = override(cfg, {"pipeline.variant": variant,
                                     "seed": cfg.seed + si})
            outcome = run_scenario(run_cfg, threads=threads, losses=False)
            a05, a07 = outcome.mean_acc
            acc05[vi, si] = a05
            acc07[vi, si] = a07
            units += outcome.ledger.units
            for key, n in outcome.count_totals().items():
                counts[key] += n
            wall += outcome.wall_ms
        stats.append((counts, units / seeds, wall))

    full_05 = acc05[variants.index("full")].mean() if "full" in variants \
        else acc05[0].mean()
    full_07 = acc07[variants.index("full")].mean() if "full" in variants \
        else acc07[0].mean()
    for vi, variant in enumerate(variants):
        counts, units, wall = stats[vi]
        rows.append({"variant": variant,
                     "acc_0.5": repr(float(acc05[vi].mean())),
                     "acc_0.7": repr(float(acc07[vi].mean())),
                     **{k: v for k, v in counts.items()},
                     "comm_units": repr(float(units)),
                     "wall_ms": f"{wall:.1f}",
                     "delta_0.5": repr(float(acc05[vi].mean() - full_05)),
                     "delta_0.7": repr(float(acc07[vi].mean() - full_07))})
    outcome = AblationOutcome(tuple(variants), acc05, acc07, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "ablation.csv", ["variant"], rows)
        if figures:
            from . import figures as fig
            fig.render_ablation(outcome, out / "ablation.png")
    return outcome
