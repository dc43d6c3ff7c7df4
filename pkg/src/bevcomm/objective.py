"""Training-style objectives and evaluation metrics.

Nothing here is optimized in this repository; the losses exist as evaluators
so configurations can be compared on the same scale a trained system would
report, and the metrics drive the robustness and ablation studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detect import Detection, IGNORED, POSITIVE
from .geometry import OrientedBox, rotated_iou

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LAMBDA_REG = 2.0
LAMBDA_DIR = 0.2
LAMBDA_DEP = 10.0
LAMBDA_GEO = 0.1
PROB_CLAMP = 1e-7
RANGE_BINS = ((0.0, 30.0), (30.0, 50.0), (50.0, 100.0))


class ObjectiveError(ValueError):
    """Raised for invalid loss or metric inputs."""


def focal_loss(p: float, y: int, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> float:
    """Focal term for a single probability and binary label.

    -alpha * (1-p)^gamma * log(p) for y=1 and
    -(1-alpha) * p^gamma * log(1-p) for y=0.
    """
    if not 0.0 < p < 1.0:
        raise ObjectiveError(f"probability must lie in (0, 1), got {p}")
    if y not in (0, 1):
        raise ObjectiveError(f"label must be 0 or 1, got {y}")
    if y == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)


def focal_map(p: np.ndarray, y: np.ndarray, alpha: float = FOCAL_ALPHA,
              gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Elementwise focal terms with the repo-wide probability clamp."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    return np.where(y >= 0.5, pos, neg)


def dice_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Soft dice with +1 smoothing: 1 - 2*sum(p*q) / (sum(p) + sum(q) + 1)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ObjectiveError("dice inputs must share a shape")
    inter = float((pred * target).sum())
    return 1.0 - 2.0 * inter / (float(pred.sum()) + float(target.sum()) + 1.0)


@dataclass(frozen=True)
class LossWeights:
    """Combination weights for the composite objectives."""

    lambda_reg: float = LAMBDA_REG
    lambda_dir: float = LAMBDA_DIR
    lambda_dep: float = LAMBDA_DEP
    lambda_geo: float = LAMBDA_GEO
    level_weights: tuple[float, ...] | None = None  # None means 1.0 per level


@dataclass(frozen=True)
class DetectionLoss:
    classification: float
    direction: float
    regression: float
    total: float


def detection_loss(class_prob: np.ndarray, dir_prob: np.ndarray,
                   labels: np.ndarray, dir_labels: np.ndarray,
                   weights: LossWeights = LossWeights()) -> DetectionLoss:
    """Composite detection objective L_cls + lambda_reg*L_reg + lambda_dir*L_dir.

    ``class_prob`` is each anchor's score and ``dir_prob`` its probability of
    yaw bin 1; ``labels`` uses the assignment convention (positive, negative,
    ignored) and ``dir_labels`` the true bin for positive anchors. There is
    no box regression in this head, so L_reg is structurally zero but still
    enters the sum with its weight.
    """
    labels = np.asarray(labels)
    used = labels != IGNORED
    if used.any():
        cls = float(np.mean(focal_map(np.asarray(class_prob)[used],
                                      (labels[used] == POSITIVE).astype(float))))
    else:
        cls = 0.0
    pos = labels == POSITIVE
    if pos.any():
        p = np.clip(np.asarray(dir_prob, dtype=np.float64)[pos],
                    PROB_CLAMP, 1.0 - PROB_CLAMP)
        yd = np.asarray(dir_labels, dtype=np.float64)[pos]
        direction = float(np.mean(-(yd * np.log(p) + (1.0 - yd) * np.log(1.0 - p))))
    else:
        direction = 0.0
    regression = 0.0
    total = cls + weights.lambda_reg * regression + weights.lambda_dir * direction
    return DetectionLoss(cls, direction, regression, total)


def depth_loss(depth_logits: np.ndarray, labels: np.ndarray,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Mean focal loss of the softmaxed depth distribution at the true bin.

    Only azimuth columns with a label (>= 0) participate; all-empty input
    gives zero.
    """
    logits = np.asarray(depth_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(labels) != len(logits):
        raise ObjectiveError("depth logits must be (columns, bins) with one label each")
    populated = labels >= 0
    if not populated.any():
        return 0.0
    z = logits[populated]
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    p_true = prob[np.arange(len(z)), labels[populated]]
    return float(np.mean(focal_map(p_true, np.ones_like(p_true), alpha, gamma)))


@dataclass(frozen=True, eq=False)
class UacLevelInputs:
    """Everything the communication objective needs at one pyramid level.

    Occupancy targets are binary cell-containment rasters. ``aligned_confs``
    and ``demand`` are ordered ego first, matching the demand map; the ego
    plane of ``demand`` weights the ego's own confidence.
    """

    local_confs: list[np.ndarray]
    local_occs: list[np.ndarray]
    aligned_confs: list[np.ndarray]
    demand: list[np.ndarray]
    consensus: list[np.ndarray]
    ego_occ: np.ndarray


def _focal_dice(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.clip(np.asarray(pred, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(focal_map(pred, target))) + dice_loss(pred, target)


def uac_loss(levels: list[UacLevelInputs],
             weights: LossWeights = LossWeights()) -> float:
    """Communication objective summed over levels.

    Per level: every agent's local confidence against its local occupancy,
    the demand-weighted blend of ego-aligned confidences against the ego's
    occupancy, and each consensus map against the same target scaled by
    lambda_geo. Level weights default to 1.
    """
    if weights.level_weights is not None and len(weights.level_weights) != len(levels):
        raise ObjectiveError("need one level weight per level")
    total = 0.0
    for idx, lv in enumerate(levels):
        w = 1.0 if weights.level_weights is None else weights.level_weights[idx]
        occ_s = float(np.mean([_focal_dice(c, o)
                               for c, o in zip(lv.local_confs, lv.local_occs)]))
        collab = np.zeros_like(np.asarray(lv.ego_occ, dtype=np.float64))
        for conf, dem in zip(lv.aligned_confs, lv.demand):
            collab = collab + np.asarray(dem, dtype=np.float64) * np.asarray(conf, dtype=np.float64)
        occ_c = _focal_dice(collab, lv.ego_occ)
        geo = float(np.mean([_focal_dice(g, lv.ego_occ) for g in lv.consensus])) \
            if lv.consensus else 0.0
        total += w * (occ_s + occ_c + weights.lambda_geo * geo)
    return float(total)


def _greedy_match(predictions: list[Detection], gts: list[OrientedBox],
                  t: float) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching by descending score; returns matched flags."""
    pred_matched = np.zeros(len(predictions), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i].score, i))
    for i in order:
        box = predictions[i].box
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if gt_matched[j]:
                continue
            if math.hypot(box.cx - gt.cx, box.cy - gt.cy) > \
                    box.circumradius + gt.circumradius:
                continue
            iou = rotated_iou(box, gt)
            if iou >= t and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            pred_matched[i] = True
            gt_matched[best_j] = True
    return pred_matched, gt_matched


def acc_at_t(predictions: list[Detection], ground_truth: list[OrientedBox],
             t: float) -> float:
    """Fraction of predictions matched one-to-one to ground truth at IoU >= t.

    An empty prediction set scores 0; callers should consult the metrics
    report flag to distinguish that case from genuinely poor output.
    """
    if not 0.0 < t <= 1.0:
        raise ObjectiveError(f"IoU threshold must be in (0, 1], got {t}")
    if not predictions:
        return 0.0
    pred_matched, _ = _greedy_match(predictions, ground_truth, t)
    return float(pred_matched.sum()) / len(predictions)


@dataclass(frozen=True, eq=False)
class ConfusionTable:
    """TP/FP/FN per range bin; predictions bin by their own range, misses by
    ground-truth range."""

    bins: tuple[tuple[float, float], ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def totals(self) -> tuple[int, int, int]:
        return int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum())


def _bin_index(rng_m: float, bins) -> int:
    for i, (lo, hi) in enumerate(bins):
        if lo <= rng_m < hi:
            return i
    return -1


def confusion(predictions: list[Detection], ground_truth: list[OrientedBox],
              t: float, ego_xy: tuple[float, float],
              bins=RANGE_BINS) -> ConfusionTable:
    """Range-binned detection outcomes at one IoU threshold.

    Inputs should already be limited to the evaluation range; entries whose
    range falls outside every bin are dropped defensively. Within the binned
    sets, TP + FP equals the prediction count and TP + FN the ground-truth
    count.
    """
    nb = len(bins)
    tp = np.zeros(nb, dtype=np.int64)
    fp = np.zeros(nb, dtype=np.int64)
    fn = np.zeros(nb, dtype=np.int64)
    pred_matched, gt_matched = _greedy_match(predictions, ground_truth, t)
    for i, det in enumerate(predictions):
        b = _bin_index(det.range_m, bins)
        if b < 0:
            continue
        if pred_matched[i]:
            tp[b] += 1
        else:
            fp[b] += 1
    ex, ey = ego_xy
    for j, gt in enumerate(ground_truth):
        if gt_matched[j]:
            continue
        b = _bin_index(math.hypot(gt.cx - ex, gt.cy - ey), bins)
        if b >= 0:
            fn[b] += 1
    return ConfusionTable(tuple(tuple(b) for b in bins), tp, fp, fn)


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Evaluation bundle for one ego at one frame."""

    acc_05: float
    acc_07: float
    table: ConfusionTable
    n_predictions: int
    n_ground_truth: int
    no_predictions: bool

    def as_dict(self) -> dict:
        return {
            "acc_0.5": self.acc_05,
            "acc_0.7": self.acc_07,
            "n_predictions": self.n_predictions,
            "n_ground_truth": self.n_ground_truth,
            "no_predictions": self.no_predictions,
            "bins": [
                {
                    "range": list(self.table.bins[i]),
                    "tp": int(self.table.tp[i]),
                    "fp": int(self.table.fp[i]),
                    "fn": int(self.table.fn[i]),
                }
                for i in range(len(self.table.bins))
            ],
        }


def evaluate(predictions: list[Detection], ground_truth: list[OrientedBox],
             ego_xy: tuple[float, float], bins=RANGE_BINS) -> MetricsReport:
    """Range-filter, then compute accuracies and the confusion table.

    Predictions and ground truth beyond the last bin edge are excluded so the
    accuracy denominators and the binned counts describe the same sets. The
    confusion table uses the 0.5 threshold.
    """
    limit = bins[-1][1]
    ex, ey = ego_xy
    preds = [d for d in predictions if d.range_m < limit]
    gts = [g for g in ground_truth
           if math.hypot(g.cx - ex, g.cy - ey) < limit]
    report = MetricsReport(
        acc_05=acc_at_t(preds, gts, 0.5) if preds else 0.0,
        acc_07=acc_at_t(preds, gts, 0.7) if preds else 0.0,
        table=confusion(preds, gts, 0.5, ego_xy, bins),
        n_predictions=len(preds),
        n_ground_truth=len(gts),
        no_predictions=not preds,
    )
    return report
