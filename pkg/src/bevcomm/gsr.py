"""Geometric structure rectification: polar-to-BEV lifting guided by radar.

The camera proxy lives on an (azimuth, depth) lattice. Lifting projects every
BEV cell into that lattice and gathers a depth-weighted feature there; a small
set of learned offsets makes the gather deformable. Radar enters twice: it can
sharpen the depth distribution before lifting, and a gated per-cell injection
adds radar evidence to the lifted features afterwards.

BEV feature channels follow one convention repo-wide: the first
``signature_dim`` channels carry semantic signature content and the last
channel carries occupancy-style evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .grid import BevGrid, GridSpec, bilinear_many, downsample
from .scene import RADAR_OCC, PolarFeatureMap, RadarReturns

DEFAULT_NUM_POINTS = 4
OFFSET_CLAMP_BINS = 3.0
# Adjacent echo points off one reflector sit within a point spacing of each
# other; distinct reflectors keep a wider berth than this between surfaces.
CLUSTER_LINK_M = 2.5


class GsrError(ValueError):
    """Raised for shape mismatches in the rectification pipeline."""


@dataclass(frozen=True, eq=False)
class GsrParams:
    """Weights for query init, deformable gather, and gated calibration.

    Shapes: ``phi_init`` (C, C_rad), ``offset_net`` (2N, C), ``point_weights``
    (N,), ``value_proj`` (C, C_img), ``gate_weights`` (3, 3, C) with a scalar
    ``gate_bias``, ``psi`` (C, C_rad).
    """

    phi_init: np.ndarray
    offset_net: np.ndarray
    point_weights: np.ndarray
    value_proj: np.ndarray
    gate_weights: np.ndarray
    gate_bias: float
    psi: np.ndarray
    sharpen_sigma_m: float = 0.0  # 0 disables radar depth sharpening

    def __post_init__(self):
        c, c_rad = self.phi_init.shape
        n = len(self.point_weights)
        if self.offset_net.shape != (2 * n, c):
            raise GsrError(f"offset_net must be ({2 * n}, {c}), got {self.offset_net.shape}")
        if self.value_proj.shape[0] != c:
            raise GsrError("value_proj output dim must match channel count")
        if self.gate_weights.shape != (3, 3, c):
            raise GsrError("gate_weights must be (3, 3, C)")
        if self.psi.shape != (c, c_rad):
            raise GsrError("psi must match (C, C_rad)")

    @property
    def channels(self) -> int:
        return self.phi_init.shape[0]

    @property
    def num_points(self) -> int:
        return len(self.point_weights)

    @classmethod
    def neutral(cls, channels: int, radar_channels: int, image_channels: int,
                num_points: int = DEFAULT_NUM_POINTS) -> "GsrParams":
        """Zero-initialized weights: the pipeline reduces to pure camera lifting."""
        value = np.zeros((channels, image_channels))
        value[:image_channels, :image_channels] = np.eye(image_channels)
        return cls(
            phi_init=np.zeros((channels, radar_channels)),
            offset_net=np.zeros((2 * num_points, channels)),
            point_weights=np.full(num_points, 1.0 / num_points),
            value_proj=value,
            gate_weights=np.zeros((3, 3, channels)),
            gate_bias=0.0,
            psi=np.zeros((channels, radar_channels)),
        )

    @classmethod
    def seeded(cls, channels: int, radar_channels: int, image_channels: int,
               num_points: int = DEFAULT_NUM_POINTS, seed: int = 0,
               scale: float = 0.1) -> "GsrParams":
        """Random small weights, for exercising every term in tests."""
        rng = np.random.default_rng(seed)
        w = rng.uniform(0.2, 1.0, num_points)
        return cls(
            phi_init=rng.normal(0.0, scale, (channels, radar_channels)),
            offset_net=rng.normal(0.0, scale * 5, (2 * num_points, channels)),
            point_weights=w / w.sum(),
            value_proj=rng.normal(0.0, scale, (channels, image_channels)),
            gate_weights=rng.normal(0.0, scale, (3, 3, channels)),
            gate_bias=float(rng.normal(0.0, scale)),
            psi=rng.normal(0.0, scale, (channels, radar_channels)),
        )

    @classmethod
    def oracle(cls, channels: int, radar_channels: int, image_channels: int,
               num_points: int = DEFAULT_NUM_POINTS, occupancy_gain: float = 0.2,
               support_gain: float = 1.0,
               sharpen_sigma_m: float = 2.0) -> "GsrParams":
        """Hand-set calibration: no training exists, so radar evidence is wired
        in directly. Radar occupancy feeds two channels and the depth
        distribution is sharpened around the clustered radar ranges per column.

        The last channel is general evidence: its gain is kept small so the
        confidence head, which reads it, still ranks cells by detectable
        signature content rather than by bare radar returns. The channel
        before it carries range-measured support at full strength for the
        scoring head, which uses it only to arbitrate between cells that
        already match a signature.
        """
        base = cls.neutral(channels, radar_channels, image_channels, num_points)
        psi = base.psi.copy()
        psi[channels - 1, RADAR_OCC] = occupancy_gain
        if channels >= image_channels + 2:
            psi[channels - 2, RADAR_OCC] = support_gain
        return cls(base.phi_init, base.offset_net, base.point_weights,
                   base.value_proj, base.gate_weights, base.gate_bias, psi,
                   sharpen_sigma_m=sharpen_sigma_m)


@dataclass(frozen=True, eq=False)
class F3dField:
    """Sampleable depth-weighted value field over (azimuth, depth) bins."""

    field: np.ndarray  # (A, D, C) float64

    def sample(self, az_coords, depth_coords) -> np.ndarray:
        """Bilinear values at fractional bin coordinates; outside is zero."""
        return bilinear_many(self.field, depth_coords, az_coords)


def build_f3d(polar: PolarFeatureMap, params: GsrParams) -> F3dField:
    """Materialize F3D(a, d) = depth_prob(a, d) * value_proj(features(a, d))."""
    if params.value_proj.shape[1] != polar.channels:
        raise GsrError(f"value_proj expects {params.value_proj.shape[1]} image "
                       f"channels, polar map has {polar.channels}")
    values = polar.features.astype(np.float64) @ params.value_proj.T
    return F3dField(polar.depth_prob[:, :, None] * values)


def init_queries(f_cam: BevGrid, f_rad: BevGrid, params: GsrParams) -> BevGrid:
    """Initial queries: camera features plus projected, downsampled radar."""
    if f_cam.channels != params.channels:
        raise GsrError("camera grid channels do not match params")
    if f_rad.height % f_cam.height or f_rad.width % f_cam.width:
        raise GsrError(f"radar grid {f_rad.height}x{f_rad.width} is not an integer "
                       f"multiple of query grid {f_cam.height}x{f_cam.width}")
    factor = f_rad.height // f_cam.height
    if f_rad.width // f_cam.width != factor:
        raise GsrError("radar/query downsample factor differs per axis")
    rad = downsample(f_rad, factor) if factor > 1 else f_rad
    if rad.channels != params.phi_init.shape[1]:
        raise GsrError("radar channels do not match phi_init input")
    q = f_cam.data.astype(np.float64) + rad.data.astype(np.float64) @ params.phi_init.T
    return f_cam.with_data(q.astype(np.float32))


def projection_coords(spec: GridSpec, polar: PolarFeatureMap
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference polar coordinates of every BEV cell center.

    Returns fractional (azimuth, depth) bin coordinates and a validity mask;
    cells behind the camera, outside the field of view, or beyond the depth
    range are invalid.
    """
    ox, oy = spec.origin
    xs = ox + np.arange(spec.width, dtype=np.float64) * spec.cell_size
    ys = oy + np.arange(spec.height, dtype=np.float64) * spec.cell_size
    xx, yy = np.meshgrid(xs, ys)
    r = np.hypot(xx, yy)
    az = np.arctan2(yy, xx)
    bin_width = 2.0 * polar.fov_half_rad / polar.azimuth_bins
    bin_depth = polar.max_depth_m / polar.depth_bins
    az_coords = (az + polar.fov_half_rad) / bin_width - 0.5
    depth_coords = r / bin_depth - 0.5
    valid = (np.abs(az) <= polar.fov_half_rad) & (r > 1e-9) & (r <= polar.max_depth_m)
    return az_coords, depth_coords, valid


def camera_lift(polar: PolarFeatureMap, spec: GridSpec, params: GsrParams) -> BevGrid:
    """Plain polar-to-BEV lifting: each cell reads F3D at its own projection."""
    f3d = build_f3d(polar, params)
    az, dp, valid = projection_coords(spec, polar)
    out = f3d.sample(az, dp)
    out[~valid] = 0.0
    return BevGrid(out.astype(np.float32), spec.cell_size, spec.origin)


def rectify(queries: BevGrid, polar: PolarFeatureMap, params: GsrParams) -> BevGrid:
    """Deformable depth-guided gather around each cell's reference projection.

    Each query produces ``num_points`` offsets (clamped to +/-3 bins on both
    axes); the output is the weighted sum of F3D samples at the offset
    locations. Cells outside the camera frustum stay zero.
    """
    if queries.channels != params.channels:
        raise GsrError("query grid channels do not match params")
    f3d = build_f3d(polar, params)
    spec = GridSpec(queries.height, queries.width, queries.cell_size, queries.origin)
    az, dp, valid = projection_coords(spec, polar)

    flat = queries.data.reshape(-1, queries.channels).astype(np.float64)
    offsets = (flat @ params.offset_net.T).reshape(
        queries.height, queries.width, params.num_points, 2)
    offsets = np.clip(offsets, -OFFSET_CLAMP_BINS, OFFSET_CLAMP_BINS)

    out = np.zeros((queries.height, queries.width, params.channels))
    for n in range(params.num_points):
        out += params.point_weights[n] * f3d.sample(
            az + offsets[:, :, n, 0], dp + offsets[:, :, n, 1])
    out[~valid] = 0.0
    return BevGrid(out.astype(np.float32), queries.cell_size, queries.origin)


def gated_calibrate(f_rect: BevGrid, f_rad: BevGrid, params: GsrParams) -> BevGrid:
    """Add gated radar evidence: out = F_rect + sigmoid(G(F_rect)) * psi(F_rad).

    The gate is a scalar per cell from a 3x3 convolution over the rectified
    features, so radar injection strength adapts spatially.
    """
    if (f_rect.height, f_rect.width) != (f_rad.height, f_rad.width):
        raise GsrError(f"rectified {f_rect.height}x{f_rect.width} and radar "
                       f"{f_rad.height}x{f_rad.width} grids must share dimensions")
    if f_rect.channels != params.channels:
        raise GsrError("rectified grid channels do not match params")
    gate = ops.sigmoid(ops.conv3x3(f_rect.data.astype(np.float64),
                                   params.gate_weights, params.gate_bias))
    injected = f_rad.data.astype(np.float64) @ params.psi.T
    out = f_rect.data.astype(np.float64) + gate[:, :, None] * injected
    return f_rect.with_data(out.astype(np.float32))


def cluster_centroids(points: np.ndarray, link_m: float) -> np.ndarray:
    """Single-linkage cluster centroids of 2D points.

    Points closer than ``link_m`` join one cluster. Echo points off one
    reflector spread over its surface; their centroid recovers the
    reflector's center regardless of how many points happened to land on it
    or how they straddle angular bin boundaries.
    """
    n = len(points)
    if n == 0:
        return np.empty((0, 2))
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    limit2 = link_m * link_m
    for i in range(n):
        diff = points[i + 1:] - points[i]
        for j in np.flatnonzero((diff * diff).sum(axis=1) <= limit2):
            ri, rj = find(i), find(i + 1 + j)
            if ri != rj:
                parent[rj] = ri
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return np.array([points[idx].mean(axis=0) for idx in groups.values()])


def sharpen_depth(polar: PolarFeatureMap, returns: RadarReturns,
                  sigma_m: float, link_m: float = CLUSTER_LINK_M
                  ) -> PolarFeatureMap:
    """Concentrate depth distributions around clustered radar reflectors.

    Points are grouped into spatial clusters; each cluster contributes one
    unit-weight Gaussian at its centroid's range, in the column holding the
    centroid's bearing, so point count and the angular straddle of surface
    echoes tilt nothing. A column's depth distribution is multiplied by its
    cluster mixture and renormalized. Every cluster keeps its own mode, so
    one near reflector cannot erase a farther object behind it; modes with
    no camera mass stay empty because the reweighting is multiplicative.
    Columns without a cluster are unchanged.
    """
    if sigma_m <= 0.0:
        raise GsrError("sharpen sigma must be positive")
    a_bins, d_bins = polar.azimuth_bins, polar.depth_bins
    bin_width = 2.0 * polar.fov_half_rad / a_bins
    bin_depth = polar.max_depth_m / d_bins
    targets: list[list[float]] = [[] for _ in range(a_bins)]
    for cx, cy in cluster_centroids(returns.points[:, :2], link_m):
        az = math.atan2(cy, cx)
        r = math.hypot(cx, cy)
        if abs(az) > polar.fov_half_rad or r <= 0 or r > polar.max_depth_m:
            continue
        a_bin = min(int((az + polar.fov_half_rad) / bin_width), a_bins - 1)
        targets[a_bin].append(r)

    prob = polar.depth_prob.copy()
    centers = (np.arange(d_bins) + 0.5) * bin_depth
    for a in range(a_bins):
        if not targets[a]:
            continue
        t = np.asarray(targets[a])
        weight = np.exp(
            -0.5 * ((centers[:, None] - t[None, :]) / sigma_m) ** 2
        ).sum(axis=1)
        col = prob[a] * weight
        total = col.sum()
        if total > 0.0:
            prob[a] = col / total
    return PolarFeatureMap(polar.features, prob, polar.depth_label,
                           polar.fov_half_rad, polar.max_depth_m)


def centroid_error(feat: BevGrid, center_xy: tuple[float, float],
                   signature: np.ndarray, window_m: float = 12.0) -> float | None:
    """Distance between an object's activation-weighted centroid and its center.

    Activation is the positive part of the per-cell match against the object's
    signature over the leading signature channels, restricted to a square
    window around the true center (agent-local coordinates). Returns None when
    the window holds no activation.
    """
    dim = len(signature)
    xs, ys = feat.cell_centers()
    cx, cy = center_xy
    window = (np.abs(xs - cx) <= window_m) & (np.abs(ys - cy) <= window_m)
    if not window.any():
        return None
    response = feat.data[:, :, :dim].astype(np.float64) @ np.asarray(signature, dtype=np.float64)
    act = np.where(window, np.maximum(response, 0.0), 0.0)
    total = act.sum()
    if total <= 1e-12:
        return None
    gx = float((act * xs).sum() / total)
    gy = float((act * ys).sum() / total)
    return math.hypot(gx - cx, gy - cy)
