"""Planar rigid transforms, cross-agent grid warping, oriented boxes, and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import BevGrid, bilinear_many

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for invalid geometric inputs or frame mismatches."""


def normalize_angle(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - yaw) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose: translation (x, y) in meters and heading yaw in radians."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"pose field {name} must be finite")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]], dtype=np.float64)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose of frame b expressed through frame a (a then b)."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + ca * b.x - sa * b.y,
                 a.y + sa * b.x + ca * b.y,
                 a.yaw + b.yaw)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.yaw)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """Transform taking coordinates in frame b to coordinates in frame a."""
    return compose(inverse(a), b)


def transform_points(pose: Pose2, pts) -> np.ndarray:
    """Map local (..., 2) points through a pose into its parent frame."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ pose.rotation().T + np.array([pose.x, pose.y])


def warp_grid(src: BevGrid, src_pose: Pose2, dst_pose: Pose2) -> BevGrid:
    """Resample a source-frame grid onto the destination agent's grid.

    Both grids share dimensions, cell size, and local origin. Each destination
    cell center is mapped into the source frame and bilinearly sampled; cells
    that land outside the source extent come back zero.
    """
    rel = relative(src_pose, dst_pose)
    xs, ys = src.cell_centers()
    pts = np.stack([xs, ys], axis=-1)
    src_pts = transform_points(rel, pts)
    cx, cy = src.world_to_cell(src_pts[..., 0], src_pts[..., 1])
    warped = bilinear_many(src.data, cx, cy)
    return src.with_data(warped.astype(np.float32))


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle in the ground plane with a nominal height."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    height: float = 1.56

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise GeometryError(
                f"box dimensions must be positive, got {self.length}x{self.width}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def circumradius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)

    def corners(self) -> np.ndarray:
        """Counter-clockwise corner coordinates, shape (4, 2)."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def moved(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(self.cx + dx, self.cy + dy, self.length, self.width,
                           self.yaw, self.height)


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    # Keep the half-plane to the left of directed edge a->b (CCW interior).
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cur_in = (b[0] - a[0]) * (cur[1] - a[1]) - (b[1] - a[1]) * (cur[0] - a[0]) >= 0.0
        nxt_in = (b[0] - a[0]) * (nxt[1] - a[1]) - (b[1] - a[1]) * (nxt[0] - a[0]) >= 0.0
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            d = nxt - cur
            denom = (b[0] - a[0]) * d[1] - (b[1] - a[1]) * d[0]
            if abs(denom) < 1e-12:
                continue
            t = ((b[0] - a[0]) * (a[1] - cur[1]) - (b[1] - a[1]) * (a[0] - cur[0])) / denom
            out.append(cur + t * d)
    return out


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Exact overlap area of two rotated rectangles via convex clipping."""
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > a.circumradius + b.circumradius:
        return 0.0
    poly = [p for p in b.corners().astype(np.float64)]
    clip = a.corners().astype(np.float64)
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    return _polygon_area(np.asarray(poly))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(detections: Sequence, iou_threshold: float, max_keep: int) -> list:
    """Greedy non-maximum suppression over objects with .box and .score.

    Candidates are visited by descending score, ties broken by ascending
    insertion index; a candidate is dropped when its IoU with any kept box
    exceeds the threshold.
    """
    if max_keep < 0:
        raise GeometryError("max_keep must be non-negative")
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    kept: list = []
    kept_boxes: list = []
    for idx in order:
        if len(kept) >= max_keep:
            break
        box = detections[idx].box
        ok = True
        for kb in kept_boxes:
            if rotated_iou(box, kb) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(detections[idx])
            kept_boxes.append(box)
    return kept
