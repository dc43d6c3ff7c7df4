"""Anchor-based matched-filter detection head over fused BEV features.

There is no learned regression: scores come from correlating fused features
against the known signature templates per yaw bin, boxes are emitted at score
lattice cell centers with the fixed anchor footprint, and duplicates are
removed by greedy suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import OrientedBox, Pose2, nms, rotated_iou, transform_points
from .grid import BevGrid, GridSpec, downsample

SCORE_THRESHOLD = 0.10
NMS_IOU = 0.05
MAX_DETECTIONS = 150
ANCHOR_LENGTH = 3.9
ANCHOR_WIDTH = 1.6
ANCHOR_HEIGHT = 1.56
ANCHOR_STRIDE = 2
ANCHOR_YAWS = (0.0, math.pi / 2.0)
DIRECTION_OFFSET_RAD = 0.7853
POSITIVE_IOU = 0.6
NEGATIVE_IOU = 0.45

IGNORED = -1
NEGATIVE = 0
POSITIVE = 1


class DetectError(ValueError):
    """Raised for malformed detection inputs."""


@dataclass(frozen=True)
class AnchorConfig:
    """Fixed single-class anchor set and post-processing constants."""

    length: float = ANCHOR_LENGTH
    width: float = ANCHOR_WIDTH
    height: float = ANCHOR_HEIGHT
    stride: int = ANCHOR_STRIDE
    yaw_bins: tuple[float, ...] = ANCHOR_YAWS
    direction_offset_rad: float = DIRECTION_OFFSET_RAD
    score_threshold: float = SCORE_THRESHOLD
    nms_iou: float = NMS_IOU
    max_detections: int = MAX_DETECTIONS
    positive_iou: float = POSITIVE_IOU
    negative_iou: float = NEGATIVE_IOU

    def __post_init__(self):
        if self.stride < 1:
            raise DetectError("anchor stride must be at least 1")
        if not 0.0 <= self.negative_iou <= self.positive_iou <= 1.0:
            raise DetectError("need 0 <= negative_iou <= positive_iou <= 1")


@dataclass(frozen=True)
class Detection:
    """One decoded box with its score and range from the ego."""

    box: OrientedBox
    score: float
    range_m: float


@dataclass(frozen=True, eq=False)
class ScoreGrid:
    """Per-yaw-bin scores on the stride-reduced lattice, ego-local geometry.

    ``logits`` keeps the pre-sigmoid responses: the sigmoid is injective but
    saturates in floating point, so ranking uses logits to keep strong cells
    ordered instead of tied at 1.0.
    """

    values: np.ndarray  # (h, w, num_bins) float64 in (0, 1)
    cell_size: float
    origin: tuple[float, float]
    logits: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def rank_values(self) -> np.ndarray:
        return self.values if self.logits is None else self.logits

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ox, oy = self.origin
        h, w = self.shape
        xs = ox + np.arange(w, dtype=np.float64) * self.cell_size
        ys = oy + np.arange(h, dtype=np.float64) * self.cell_size
        return np.meshgrid(xs, ys)


def templates(bank: np.ndarray, channels: int) -> np.ndarray:
    """Matched-filter template per yaw bin.

    Signatures of one bin sum into a single template (orthonormality keeps
    the per-type responses separable under the inner product). Templates are
    zero on the evidence channel: occupancy evidence has no orientation, so
    it must never let a featureless cell outscore the empty-field baseline.
    """
    num_types, bins, dim = bank.shape
    if channels < dim:
        raise DetectError(f"feature channels {channels} cannot hold "
                          f"signature dim {dim}")
    out = np.zeros((bins, channels))
    out[:, :dim] = bank.sum(axis=0)
    return out


def score_map(fused: BevGrid, bank: np.ndarray, config: AnchorConfig,
              beta: float = 4.0, occupancy_weight: float = 0.0,
              support_channel: int | None = None) -> ScoreGrid:
    """Matched-filter scores on the fused grid mean-pooled by the anchor
    stride: sigmoid(beta * <feature, template> * (1 + w * support)), with
    the cell's range-support channel scaling its signature match.

    A zero feature field scores 0.5 everywhere regardless of support; a
    cell exactly matching a signature with no support scores
    sigmoid(beta). Support multiplies rather than adds, so it decides
    between neighboring cells that match the same signature while cells
    without signature content stay at the baseline.
    """
    pooled = downsample(fused, config.stride) if config.stride > 1 else fused
    temps = templates(bank, fused.channels)
    data = pooled.data.astype(np.float64)
    logits = beta * (data @ temps.T)
    if occupancy_weight != 0.0 and support_channel is not None:
        boost = 1.0 + occupancy_weight * np.clip(
            data[:, :, support_channel:support_channel + 1], 0.0, None)
        logits = logits * boost
    return ScoreGrid(ops.sigmoid(logits), pooled.cell_size, pooled.origin,
                     logits=logits)


def decode(scores: ScoreGrid, config: AnchorConfig, ego_pose: Pose2
           ) -> list[Detection]:
    """Boxes from the score lattice: threshold, suppress, cap.

    Every cell whose best bin exceeds the score threshold emits a box at the
    cell center with the anchor footprint and the winning bin's yaw. Cell
    centers are placed in the world frame through the ego pose; bin yaws are
    already world-frame because signature content is binned by world
    orientation and grid warps cannot re-bin channels. Greedy suppression at
    the configured IoU keeps at most ``max_detections`` boxes, scores
    descending.
    """
    rank = scores.rank_values()
    best_bin = np.argmax(rank, axis=2)
    best = np.take_along_axis(scores.values, best_bin[:, :, None], axis=2)[:, :, 0]
    best_rank = np.take_along_axis(rank, best_bin[:, :, None], axis=2)[:, :, 0]
    keep = best > config.score_threshold
    if not keep.any():
        return []
    rows, cols = np.nonzero(keep)
    order = np.argsort(-best_rank[rows, cols], kind="stable")
    rows, cols = rows[order], cols[order]

    xs, ys = scores.cell_centers()
    local = np.stack([xs[rows, cols], ys[rows, cols]], axis=1)
    world = transform_points(ego_pose, local)
    ex, ey = ego_pose.x, ego_pose.y

    candidates = []
    for i in range(len(rows)):
        r, c = rows[i], cols[i]
        yaw = config.yaw_bins[best_bin[r, c]]
        box = OrientedBox(world[i, 0], world[i, 1], config.length, config.width,
                          yaw, config.height)
        rng_m = math.hypot(world[i, 0] - ex, world[i, 1] - ey)
        candidates.append(Detection(box, float(best[r, c]), rng_m))
    return nms(candidates, config.nms_iou, config.max_detections)


def lattice_spec(fused: GridSpec | BevGrid, config: AnchorConfig) -> GridSpec:
    """Geometry of the stride-reduced score lattice for a feature grid."""
    if isinstance(fused, BevGrid):
        fused = GridSpec(fused.height, fused.width, fused.cell_size, fused.origin)
    s = config.stride
    if fused.height % s or fused.width % s:
        raise DetectError(f"grid {fused.height}x{fused.width} not divisible by "
                          f"stride {s}")
    shift = (s - 1) / 2.0 * fused.cell_size
    return GridSpec(fused.height // s, fused.width // s, fused.cell_size * s,
                    (fused.origin[0] + shift, fused.origin[1] + shift))


def make_anchors(spec: GridSpec, config: AnchorConfig, ego_pose: Pose2
                 ) -> list[OrientedBox]:
    """World-frame anchor boxes, row-major cells with yaw bins innermost."""
    ox, oy = spec.origin
    anchors = []
    for r in range(spec.height):
        for c in range(spec.width):
            local = (ox + c * spec.cell_size, oy + r * spec.cell_size)
            wx, wy = transform_points(ego_pose, np.array([local]))[0]
            for yaw in config.yaw_bins:
                anchors.append(OrientedBox(wx, wy, config.length, config.width,
                                           yaw + ego_pose.yaw, config.height))
    return anchors


def assign_targets(anchors: list[OrientedBox], gt_boxes: list[OrientedBox],
                   config: AnchorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels by IoU: positive >= 0.6, negative <= 0.45, else ignored.

    Returns (labels, matched_gt_index); unmatched entries carry -1. A coarse
    center-distance gate skips pairs that cannot overlap, which leaves the
    exact IoU untouched.
    """
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if not gt_boxes:
        return labels, matched
    a_centers = np.array([[a.cx, a.cy] for a in anchors])
    g_centers = np.array([[g.cx, g.cy] for g in gt_boxes])
    a_rad = np.array([a.circumradius for a in anchors])
    g_rad = np.array([g.circumradius for g in gt_boxes])
    dists = np.hypot(a_centers[:, None, 0] - g_centers[None, :, 0],
                     a_centers[:, None, 1] - g_centers[None, :, 1])
    near = dists <= (a_rad[:, None] + g_rad[None, :])
    for i in range(n):
        best_iou, best_j = 0.0, -1
        for j in np.nonzero(near[i])[0]:
            iou = rotated_iou(anchors[i], gt_boxes[j])
            if iou > best_iou:
                best_iou, best_j = iou, int(j)
        if best_iou >= config.positive_iou:
            labels[i] = POSITIVE
            matched[i] = best_j
        elif best_iou > config.negative_iou:
            labels[i] = IGNORED
    return labels, matched
