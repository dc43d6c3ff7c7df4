"""Experiment configuration: YAML loading, validation, and overrides.

Bad input raises :class:`ConfigError` with a dotted path to the offending
key, so the command line can report it and exit with the configuration
status code.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import yaml

from .scene import CameraConfig, RadarConfig, WorldConfig

VARIANTS = (
    "full",
    "no-gsr",
    "no-consensus",
    "no-agent-token",
    "camera-only",
    "radar-only",
)


class ConfigError(ValueError):
    """Raised for unreadable, malformed, or out-of-range configuration."""


@dataclass(frozen=True)
class GridSettings:
    """Ego-frame lattice shared by all agents."""

    height: int = 64
    width: int = 64
    cell_size_m: float = 1.25
    levels: int = 3

    def __post_init__(self) -> None:
        if self.height < 2 or self.width < 2:
            raise ConfigError("grid must be at least 2x2")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        step = 2 ** (self.levels - 1)
        if self.height % (2 * step) or self.width % (2 * step):
            raise ConfigError(
                f"grid {self.height}x{self.width} does not pool cleanly "
                f"through {self.levels} levels plus the anchor stride")
        if not self.cell_size_m > 0.0:
            raise ConfigError(f"cell_size_m must be positive, got {self.cell_size_m}")


@dataclass(frozen=True)
class ChannelSettings:
    """Link impairments applied to every agent pair."""

    latency_ms: float = 0.0
    drop_prob: float = 0.0
    sigma_xy_m: float = 0.0
    sigma_yaw_rad: float = 0.0

    def __post_init__(self) -> None:
        if self.latency_ms < 0.0:
            raise ConfigError(f"latency_ms must be >= 0, got {self.latency_ms}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        if self.sigma_xy_m < 0.0 or self.sigma_yaw_rad < 0.0:
            raise ConfigError("pose noise sigmas must be >= 0")


@dataclass(frozen=True)
class CommSettings:
    """Bandwidth knobs: per-level keep ratio and an optional hard cap."""

    ratio: float = 0.25
    budget_units: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.budget_units is not None and not self.budget_units > 0.0:
            raise ConfigError(
                f"budget_units must be positive when set, got {self.budget_units}")


@dataclass(frozen=True)
class PipelineSettings:
    """Variant toggle and how module weights are produced."""

    variant: str = "full"
    weights: str = "oracle"
    weight_seed: int = 0
    sharpen_sigma_m: float = 2.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        if self.weights not in ("oracle", "seeded", "neutral"):
            raise ConfigError(
                f"weights must be oracle, seeded, or neutral; got {self.weights!r}")
        if self.weight_seed < 0:
            raise ConfigError(f"weight_seed must be >= 0, got {self.weight_seed}")
        if self.sharpen_sigma_m < 0.0:
            raise ConfigError(
                f"sharpen_sigma_m must be >= 0, got {self.sharpen_sigma_m}")


@dataclass(frozen=True)
class SweepSettings:
    """Value lists for the robustness sweeps and how many seeds to average."""

    latencies: tuple[float, ...] = (0.0, 50.0, 100.0, 150.0, 200.0)
    pose_sigmas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2)
    ratios: tuple[float, ...] = (0.25, 0.5, 0.6, 0.75, 1.0)
    num_seeds: int = 20

    def __post_init__(self) -> None:
        for name, values in (("latencies", self.latencies),
                             ("pose_sigmas", self.pose_sigmas),
                             ("ratios", self.ratios)):
            if not values:
                raise ConfigError(f"{name} must not be empty")
        if any(v < 0 for v in self.latencies + self.pose_sigmas):
            raise ConfigError("sweep values must be >= 0")
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ConfigError("sweep ratios must lie in (0, 1]")
        if self.num_seeds < 1:
            raise ConfigError(f"num_seeds must be >= 1, got {self.num_seeds}")


@dataclass(frozen=True)
class OutputSettings:
    dir: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings for one run."""

    world: WorldConfig = WorldConfig()
    radar: RadarConfig = RadarConfig()
    camera: CameraConfig = CameraConfig()
    grid: GridSettings = GridSettings()
    channel: ChannelSettings = ChannelSettings()
    comm: CommSettings = CommSettings()
    pipeline: PipelineSettings = PipelineSettings()
    sweep: SweepSettings = SweepSettings()
    output: OutputSettings = OutputSettings()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for dim in (self.grid.height, self.grid.width):
            extent = dim * self.grid.cell_size_m
            if not math.isclose(extent, self.world.extent_m, rel_tol=1e-9):
                raise ConfigError(
                    f"grid covers {extent} m but scenario.extent_m is "
                    f"{self.world.extent_m}; they must match")


_SECTIONS: dict[str, tuple[type, frozenset[str]]] = {
    "scenario": (WorldConfig, frozenset({"timestamps"})),
    "radar": (RadarConfig, frozenset()),
    "camera": (CameraConfig, frozenset()),
    "grid": (GridSettings, frozenset()),
    "channel": (ChannelSettings, frozenset()),
    "comm": (CommSettings, frozenset()),
    "pipeline": (PipelineSettings, frozenset()),
    "sweep": (SweepSettings, frozenset()),
    "output": (OutputSettings, frozenset()),
}

_FIELD_ATTR = {"scenario": "world"}


def _coerce(value: object, kind: type, path: str) -> object:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build_section(name: str, raw: object):
    cls, excluded = _SECTIONS[name]
    hints = typing.get_type_hints(cls)
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name}: expected a mapping, got {raw!r}")
    kwargs: dict[str, object] = {}
    allowed = {f.name for f in dataclasses.fields(cls)} - excluded
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in allowed:
            raise ConfigError(f"{path}: unknown key")
        hint = hints[key]
        if hint == (float | None):
            kwargs[key] = None if value is None else _coerce(value, float, path)
        elif hint == (str | None):
            kwargs[key] = None if value is None else _coerce(value, str, path)
        elif hint == tuple[float, ...]:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
            kwargs[key] = tuple(_coerce(v, float, f"{path}[{i}]")
                                for i, v in enumerate(value))
        else:
            kwargs[key] = _coerce(value, hint, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"{name}: {err}") from err


def from_mapping(data: Mapping | None) -> ExperimentConfig:
    """Validate a parsed YAML document into an :class:`ExperimentConfig`."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"top level must be a mapping, got {data!r}")
    leftover = dict(data)
    kwargs: dict[str, object] = {}
    for name in _SECTIONS:
        raw = leftover.pop(name, None)
        kwargs[_FIELD_ATTR.get(name, name)] = _build_section(name, raw)
    if "seed" in leftover:
        kwargs["seed"] = _coerce(leftover.pop("seed"), int, "seed")
    if leftover:
        unknown = sorted(str(k) for k in leftover)
        raise ConfigError(f"{unknown[0]}: unknown key")
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML file and validate it."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path} is not valid YAML: {err}") from err
    return from_mapping(data)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def to_mapping(config: ExperimentConfig) -> dict:
    """Resolved settings as a plain mapping; round-trips through
    :func:`from_mapping`."""
    out: dict[str, object] = {}
    for name in _SECTIONS:
        cls, excluded = _SECTIONS[name]
        section = getattr(config, _FIELD_ATTR.get(name, name))
        fields = {}
        for f in dataclasses.fields(cls):
            if f.name in excluded:
                continue
            value = getattr(section, f.name)
            fields[f.name] = list(value) if isinstance(value, tuple) else value
        out[name] = fields
    out["seed"] = config.seed
    return out


def override(config: ExperimentConfig, assignments: Mapping[str, object]) -> ExperimentConfig:
    """Apply dotted-path assignments (for sweeps and CLI flags) and revalidate."""
    data = to_mapping(config)
    for path, value in assignments.items():
        parts = path.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"{path}: unknown key")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{path}: unknown key")
        node[parts[-1]] = value
    return from_mapping(data)
