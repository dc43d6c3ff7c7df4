"""Seeded synthetic world with a surface-point radar and a polar camera proxy.

The world is a square ground-plane extent containing non-overlapping car-sized
objects and a handful of static agents. Object centers sit on the detection
lattice (anchor stride times cell size) with small jitter, headings stay close
to one of the two anchor orientations, and each object carries a constant
velocity. Positions are referenced to time 0, the evaluation instant; sensing
at negative times extrapolates backwards, which is how link latency is fed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import OrientedBox, Pose2, normalize_angle
from .grid import BevGrid, GridSpec

# Radar raster channel layout.
RADAR_HITS = 0
RADAR_RCS = 1
RADAR_DOPPLER = 2
RADAR_OCC = 3
RADAR_CHANNELS = 4

# Default car footprint; matches the detection anchor.
CAR_LENGTH = 3.9
CAR_WIDTH = 1.6
CAR_HEIGHT = 1.56

# Minimum center spacing keeps box IoU at zero and survives suppression.
MIN_OBJECT_SPACING_M = 7.0
EDGE_MARGIN_M = 4.0
PLACEMENT_ATTEMPTS = 1000

_TAG_PLACEMENT = 0x706C
_TAG_RADAR = 0x7261
_TAG_CAMERA = 0x6361


class SceneError(ValueError):
    """Raised for invalid scene configuration."""


class PlacementError(SceneError):
    """Raised when rejection sampling cannot place all objects."""


@dataclass(frozen=True)
class AgentSpec:
    """Static sensing agent: identity, mounting pose, and sensor envelope."""

    agent_id: int
    pose: Pose2
    fov_half_rad: float
    sensing_radius_m: float

    def __post_init__(self):
        if not 0.0 < self.fov_half_rad <= math.pi:
            raise SceneError(f"fov_half_rad must be in (0, pi], got {self.fov_half_rad}")
        if self.sensing_radius_m <= 0.0:
            raise SceneError("sensing_radius_m must be positive")


@dataclass(frozen=True)
class WorldObject:
    """Moving box with a signature index into the world's signature bank."""

    box: OrientedBox
    signature: int
    velocity: tuple[float, float]

    def at(self, t_ms: float) -> OrientedBox:
        dt = t_ms / 1000.0
        return self.box.moved(self.velocity[0] * dt, self.velocity[1] * dt)


@dataclass(frozen=True)
class World:
    extent_m: float
    seed: int
    objects: tuple[WorldObject, ...]
    agents: tuple[AgentSpec, ...]
    timestamps: tuple[int, ...]
    bank: np.ndarray  # (num_types, 2, signature_dim) orthonormal rows

    def __post_init__(self):
        arr = np.array(self.bank, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "bank", arr)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "timestamps", tuple(int(t) for t in self.timestamps))

    @property
    def signature_dim(self) -> int:
        return self.bank.shape[2]

    def boxes_at(self, t_ms: float) -> list[OrientedBox]:
        return [o.at(t_ms) for o in self.objects]


@dataclass(frozen=True)
class WorldConfig:
    """Generation knobs for :func:`generate_world`."""

    extent_m: float = 80.0
    object_count: int = 20
    agent_count: int = 3
    fov_half_rad: float = 1.2
    sensing_radius_m: float = 32.0
    lattice_m: float = 2.5
    position_jitter_m: float = 0.12
    yaw_jitter_rad: float = 0.04
    speed_min_mps: float = 2.0
    speed_max_mps: float = 15.0
    num_signatures: int = 8
    signature_dim: int = 16
    agent_ring_ratio: float = 0.35
    timestamps: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.extent_m <= 0:
            raise SceneError("extent_m must be positive")
        if self.object_count < 0 or self.agent_count < 1:
            raise SceneError("need a non-negative object count and at least one agent")
        if not 0 <= self.speed_min_mps <= self.speed_max_mps:
            raise SceneError("speed range must satisfy 0 <= min <= max")
        if self.num_signatures < 1 or self.signature_dim < 2 * self.num_signatures:
            raise SceneError("signature_dim must be at least 2 * num_signatures")


@dataclass(frozen=True)
class RadarConfig:
    sigma_range_m: float = 0.1
    clutter_rate: float = 2.0
    points_per_object: int = 16
    object_rcs: float = 1.0
    clutter_rcs: float = 0.1

    def __post_init__(self):
        if self.sigma_range_m < 0 or self.clutter_rate < 0:
            raise SceneError("radar noise parameters must be non-negative")
        if self.points_per_object < 1:
            raise SceneError("points_per_object must be at least 1")


@dataclass(frozen=True)
class CameraConfig:
    azimuth_bins: int = 64
    depth_bins: int = 64
    max_depth_m: float = 30.0
    depth_sigma_ratio: float = 0.35
    depth_sigma_min_m: float = 3.0
    depth_bias_ratio: float = 0.15
    occlusion_attenuation: float = 0.5
    signature_gain: float = 300.0

    def __post_init__(self):
        if self.azimuth_bins < 1 or self.depth_bins < 1:
            raise SceneError("polar map needs at least one bin per axis")
        if self.max_depth_m <= 0:
            raise SceneError("max_depth_m must be positive")
        if self.depth_sigma_ratio < 0 or self.depth_bias_ratio < 0 \
                or self.depth_sigma_min_m < 0:
            raise SceneError("depth spread ratios must be non-negative")


@dataclass(frozen=True)
class RadarReturns:
    """Point echoes in the sensing agent's local frame.

    ``points`` columns are (x, y, range, doppler, rcs); ``source`` holds the
    index of the generating object, or -1 for clutter. Doppler is the radial
    range rate, positive for receding targets.
    """

    agent_id: int
    points: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 5)
        src = np.array(self.source, dtype=np.int32, copy=True).reshape(-1)
        if len(pts) != len(src):
            raise SceneError("points and source must have equal length")
        pts.flags.writeable = False
        src.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source", src)


@dataclass(frozen=True)
class PolarFeatureMap:
    """Camera proxy output over (azimuth, depth) bins in the agent frame.

    ``features`` holds deposited signature energy, ``depth_prob`` a
    per-azimuth-column probability over depth bins (each column sums to one),
    and ``depth_label`` the true depth bin of the nearest visible object per
    column, -1 where the column saw nothing.
    """

    features: np.ndarray
    depth_prob: np.ndarray
    depth_label: np.ndarray
    fov_half_rad: float
    max_depth_m: float

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32, copy=True)
        prob = np.array(self.depth_prob, dtype=np.float64, copy=True)
        label = np.array(self.depth_label, dtype=np.int32, copy=True)
        if feats.ndim != 3 or prob.shape != feats.shape[:2] or label.shape != feats.shape[:1]:
            raise SceneError("inconsistent polar map array shapes")
        for arr in (feats, prob, label):
            arr.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "depth_prob", prob)
        object.__setattr__(self, "depth_label", label)

    @property
    def azimuth_bins(self) -> int:
        return self.features.shape[0]

    @property
    def depth_bins(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    def depth_logits(self) -> np.ndarray:
        """Log of the depth distribution, usable as proxy classifier logits."""
        return np.log(np.clip(self.depth_prob, 1e-12, None))


def signature_bank(num_types: int, dim: int, seed: int) -> np.ndarray:
    """Fixed orthonormal signatures, one vector per (type, yaw bin).

    Built from the QR decomposition of a seeded Gaussian matrix with the sign
    convention pinned, so the same inputs always give the same bank.
    """
    if dim < 2 * num_types:
        raise SceneError(f"signature dim {dim} cannot host {num_types} types "
                         f"with two orientations each")
    rng = ops.stream(seed, 0xBA2C)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q[:2 * num_types].reshape(num_types, 2, dim))


def yaw_bin_of(yaw: float) -> int:
    """Nearest anchor orientation: 0 for east-west, 1 for north-south."""
    m = normalize_angle(yaw) % math.pi
    return 0 if (m < math.pi / 4 or m > 3 * math.pi / 4) else 1


def _lattice_sites(extent_m: float, lattice_m: float) -> np.ndarray:
    half = extent_m / 2.0 - EDGE_MARGIN_M
    k_max = int(math.floor(half / lattice_m - 0.5))
    coords = (np.arange(-k_max - 1, k_max + 1) + 0.5) * lattice_m
    coords = coords[np.abs(coords) <= half]
    xx, yy = np.meshgrid(coords, coords)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def generate_world(config: WorldConfig, seed: int) -> World:
    """Sample a deterministic world for a seed.

    Objects are rejection-sampled onto lattice sites with a minimum center
    spacing (pairwise box IoU stays exactly zero); agents sit on a ring
    facing the scene center, snapped to the lattice and to quarter-turn
    headings so their detection lattices coincide with the object lattice.
    """
    rng = ops.stream(seed, _TAG_PLACEMENT)
    sites = _lattice_sites(config.extent_m, config.lattice_m)
    if len(sites) == 0 and config.object_count > 0:
        raise PlacementError("extent too small for any lattice site")

    objects: list[WorldObject] = []
    centers: list[np.ndarray] = []
    for _ in range(config.object_count):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            site = sites[rng.integers(len(sites))]
            jitter = rng.uniform(-config.position_jitter_m, config.position_jitter_m, 2)
            center = site + jitter
            if centers and np.min(np.hypot(*(np.array(centers) - center).T)) < MIN_OBJECT_SPACING_M:
                continue
            yaw = (math.pi / 2.0) * rng.integers(2) \
                + rng.uniform(-config.yaw_jitter_rad, config.yaw_jitter_rad)
            speed = rng.uniform(config.speed_min_mps, config.speed_max_mps)
            heading = yaw + math.pi * rng.integers(2)
            velocity = (speed * math.cos(heading), speed * math.sin(heading))
            signature = int(rng.integers(config.num_signatures))
            box = OrientedBox(center[0], center[1], CAR_LENGTH, CAR_WIDTH, yaw, CAR_HEIGHT)
            objects.append(WorldObject(box, signature, velocity))
            centers.append(center)
            break
        else:
            raise PlacementError(
                f"failed to place object {len(objects)} after {PLACEMENT_ATTEMPTS} attempts")

    agents: list[AgentSpec] = []
    ring = config.agent_ring_ratio * config.extent_m
    taken: set[tuple[float, float]] = set()
    for k in range(config.agent_count):
        theta = 2.0 * math.pi * k / config.agent_count + math.pi / (2 * config.agent_count)
        raw = np.array([ring * math.cos(theta), ring * math.sin(theta)])
        pos = np.round(raw / config.lattice_m) * config.lattice_m
        if tuple(pos) in taken:
            pos = pos + np.array([config.lattice_m, 0.0])
        taken.add(tuple(pos))
        yaw = (math.pi / 2.0) * round(math.atan2(-pos[1], -pos[0]) / (math.pi / 2.0))
        agents.append(AgentSpec(k, Pose2(pos[0], pos[1], yaw),
                                config.fov_half_rad, config.sensing_radius_m))

    bank = signature_bank(config.num_signatures, config.signature_dim, seed=0)
    return World(config.extent_m, int(seed), tuple(objects), tuple(agents),
                 config.timestamps, bank)


def _perimeter_points(box: OrientedBox, fractions: np.ndarray) -> np.ndarray:
    """World points on the box boundary at given perimeter fractions."""
    hl, hw = box.length / 2.0, box.width / 2.0
    per = 2.0 * (box.length + box.width)
    s = fractions * per
    pts = np.empty((len(s), 2))
    for i, si in enumerate(s):
        if si < box.length:
            pts[i] = (si - hl, -hw)
        elif si < box.length + box.width:
            pts[i] = (hl, si - box.length - hw)
        elif si < 2 * box.length + box.width:
            pts[i] = (hl - (si - box.length - box.width), hw)
        else:
            pts[i] = (-hl, hw - (si - 2 * box.length - box.width))
    c, sn = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -sn], [sn, c]])
    return pts @ rot.T + np.array([box.cx, box.cy])


def segment_hits_box(p0, p1, box: OrientedBox) -> bool:
    """True when the open segment p0->p1 passes through the box interior."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s], [-s, c]])
    a = rot @ (np.asarray(p0, dtype=np.float64) - [box.cx, box.cy])
    b = rot @ (np.asarray(p1, dtype=np.float64) - [box.cx, box.cy])
    d = b - a
    t0, t1 = 0.0, 1.0
    for axis, half in ((0, box.length / 2.0), (1, box.width / 2.0)):
        if abs(d[axis]) < 1e-12:
            if abs(a[axis]) > half:
                return False
            continue
        lo = (-half - a[axis]) / d[axis]
        hi = (half - a[axis]) / d[axis]
        if lo > hi:
            lo, hi = hi, lo
        t0, t1 = max(t0, lo), min(t1, hi)
        if t0 >= t1:
            return False
    return t0 < t1 and t1 > 1e-9 and t0 < 1.0 - 1e-9


def sense_radar(world: World, agent: AgentSpec, config: RadarConfig,
                t_ms: int = 0) -> RadarReturns:
    """Surface-point radar echoes for one agent at one timestamp.

    Each in-range object contributes ``points_per_object`` boundary points
    with Gaussian range noise applied along the line of sight. Doppler is the
    exact radial velocity of the true surface point. Clutter points follow a
    Poisson count, uniform over the sensing disk.
    """
    rng = ops.stream(world.seed, _TAG_RADAR, agent.agent_id, ops.time_key(t_ms))
    apos = np.array([agent.pose.x, agent.pose.y])
    cs, sn = math.cos(agent.pose.yaw), math.sin(agent.pose.yaw)
    to_local = np.array([[cs, sn], [-sn, cs]])

    rows: list[np.ndarray] = []
    sources: list[int] = []
    for idx, obj in enumerate(world.objects):
        box = obj.at(t_ms)
        if math.hypot(box.cx - apos[0], box.cy - apos[1]) > agent.sensing_radius_m:
            continue
        fracs = rng.uniform(0.0, 1.0, config.points_per_object)
        pts = _perimeter_points(box, fracs)
        noise = rng.normal(0.0, config.sigma_range_m, config.points_per_object) \
            if config.sigma_range_m > 0 else np.zeros(config.points_per_object)
        for p, dr in zip(pts, noise):
            offset = p - apos
            r_true = float(np.hypot(*offset))
            if r_true < 1e-9:
                continue
            ray = offset / r_true
            doppler = float(np.dot(obj.velocity, ray))
            r_meas = r_true + dr
            local = to_local @ (ray * r_meas)
            rows.append(np.array([local[0], local[1], r_meas, doppler, config.object_rcs]))
            sources.append(idx)

    n_clutter = int(rng.poisson(config.clutter_rate)) if config.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        r = agent.sensing_radius_m * math.sqrt(rng.uniform())
        theta = rng.uniform(-math.pi, math.pi)
        local = np.array([r * math.cos(theta), r * math.sin(theta)])
        doppler = float(rng.normal(0.0, 2.0))
        rows.append(np.array([local[0], local[1], r, doppler, config.clutter_rcs]))
        sources.append(-1)

    pts = np.array(rows) if rows else np.empty((0, 5))
    return RadarReturns(agent.agent_id, pts, np.array(sources, dtype=np.int32))


def sense_camera(world: World, agent: AgentSpec, config: CameraConfig,
                 t_ms: int = 0) -> PolarFeatureMap:
    """Polar camera proxy: full-strength column signatures, uncertain depth.

    Every object inside the field of view and depth range deposits its
    signature across its whole azimuth column; the column's depth
    distribution is a Gaussian centered on a per-object perceived depth,
    ``depth_sigma_ratio`` times that depth wide with a floor of
    ``depth_sigma_min_m``, normalized per column. The
    perceived depth carries a relative bias drawn per object and timestamp:
    the part of single-view depth error that no amount of smoothing removes,
    and that an independent range measurement can. Depth uncertainty
    therefore lives entirely in ``depth_prob``; the feature planes answer
    only "what is in this column". Each occluder between the camera and the
    object scales the deposit by ``occlusion_attenuation``.
    """
    dim = world.signature_dim
    a_bins, d_bins = config.azimuth_bins, config.depth_bins
    feats = np.zeros((a_bins, d_bins, dim), dtype=np.float64)
    mass = np.zeros((a_bins, d_bins), dtype=np.float64)
    depth_label = np.full(a_bins, -1, dtype=np.int32)
    label_range = np.full(a_bins, np.inf)

    apos = np.array([agent.pose.x, agent.pose.y])
    cs, sn = math.cos(agent.pose.yaw), math.sin(agent.pose.yaw)
    to_local = np.array([[cs, sn], [-sn, cs]])
    bin_width = 2.0 * agent.fov_half_rad / a_bins
    bin_depth = config.max_depth_m / d_bins
    depth_centers = (np.arange(d_bins) + 0.5) * bin_depth

    rng = ops.stream(world.seed, _TAG_CAMERA, agent.agent_id, ops.time_key(t_ms))
    biases = rng.normal(0.0, config.depth_bias_ratio, len(world.objects)) \
        if config.depth_bias_ratio > 0 else np.zeros(len(world.objects))

    boxes = world.boxes_at(t_ms)
    for idx, obj in enumerate(world.objects):
        box = boxes[idx]
        local = to_local @ (np.array([box.cx, box.cy]) - apos)
        r = float(np.hypot(*local))
        az = math.atan2(local[1], local[0])
        if r < 1e-6 or r > config.max_depth_m or abs(az) > agent.fov_half_rad:
            continue
        occluders = sum(
            1 for j, other in enumerate(boxes)
            if j != idx and segment_hits_box(apos, [box.cx, box.cy], other))
        atten = config.occlusion_attenuation ** occluders

        a_bin = min(int((az + agent.fov_half_rad) / bin_width), a_bins - 1)
        r_seen = r * (1.0 + float(biases[idx]))
        sigma = max(config.depth_sigma_min_m, config.depth_sigma_ratio * r)
        if sigma < 1e-9:
            profile = np.zeros(d_bins)
            profile[min(max(int(r_seen / bin_depth), 0), d_bins - 1)] = 1.0
        else:
            w = np.exp(-0.5 * ((depth_centers - r_seen) / sigma) ** 2)
            total = w.sum()
            if total <= 0.0:
                continue
            profile = w / total
        sig = world.bank[obj.signature, yaw_bin_of(box.yaw)]
        feats[a_bin] += atten * config.signature_gain * sig[None, :]
        mass[a_bin] += atten * profile
        if r < label_range[a_bin]:
            label_range[a_bin] = r
            depth_label[a_bin] = min(int(r / bin_depth), d_bins - 1)

    col_mass = mass.sum(axis=1, keepdims=True)
    depth_prob = np.where(col_mass > 0.0, mass / np.where(col_mass > 0, col_mass, 1.0),
                          1.0 / d_bins)
    return PolarFeatureMap(feats.astype(np.float32), depth_prob, depth_label,
                           agent.fov_half_rad, config.max_depth_m)


def rasterize_radar(returns: RadarReturns, spec: GridSpec) -> BevGrid:
    """Accumulate radar points into a BEV raster.

    Channels are (hit count, mean rcs, mean doppler, occupancy); cells without
    points are all zero.
    """
    data = np.zeros((spec.height, spec.width, RADAR_CHANNELS), dtype=np.float64)
    ox, oy = spec.origin
    for x, y, _r, doppler, rcs in returns.points:
        col = int(math.floor((x - ox) / spec.cell_size + 0.5))
        row = int(math.floor((y - oy) / spec.cell_size + 0.5))
        if 0 <= row < spec.height and 0 <= col < spec.width:
            data[row, col, RADAR_HITS] += 1.0
            data[row, col, RADAR_RCS] += rcs
            data[row, col, RADAR_DOPPLER] += doppler
    hits = data[:, :, RADAR_HITS]
    occupied = hits > 0
    for ch in (RADAR_RCS, RADAR_DOPPLER):
        data[:, :, ch] = np.where(occupied, data[:, :, ch] / np.where(occupied, hits, 1.0), 0.0)
    data[:, :, RADAR_OCC] = occupied.astype(np.float64)
    return BevGrid(data.astype(np.float32), spec.cell_size, spec.origin)
