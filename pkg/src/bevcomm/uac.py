"""Uncertainty-aware communication: who needs what, and how much to send.

For an ego agent and each source (itself plus every neighbor), a per-cell
demand weight is derived from the ego's uncertainty and the source's
confidence. Tokens are the top-K cells of a neighbor's demand slice; selected
token features pass through a small deformable refinement, and the cells left
behind are summarized into a single agent-wise token by one round of scaled
dot-product attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .grid import BevGrid, bilinear_many

DEFAULT_EPSILON = 1e-6
DEFAULT_REFINE_POINTS = 4
REFINE_CLAMP_CELLS = 3.0


class UacError(ValueError):
    """Raised for invalid communication-selection inputs."""


@dataclass(frozen=True, eq=False)
class UacParams:
    """Per-level weights for confidence, demand, refinement, and summary.

    All per-level fields are tuples of length ``levels``. The demand head
    consumes the ego feature vector concatenated with (uncertainty, source
    confidence); the trust head is a 3x3 convolution over the ego features
    concatenated with the demand response.
    """

    conf_weights: tuple[np.ndarray, ...]   # each (C,)
    conf_bias: tuple[float, ...]
    diff_weights: tuple[np.ndarray, ...]   # each (C + 2,)
    diff_bias: tuple[float, ...]
    trust_weights: tuple[np.ndarray, ...]  # each (3, 3, C + 1)
    trust_bias: tuple[float, ...]
    refine_offset_net: np.ndarray          # (2 * Nr, C)
    refine_weights: np.ndarray             # (Nr,)
    token_vector: tuple[np.ndarray, ...]   # each (C,)
    token_query: np.ndarray                # (C, C)
    token_key: np.ndarray                  # (C, C)
    token_value: np.ndarray                # (C, C)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        c = len(self.conf_weights[0])
        levels = len(self.conf_weights)
        fields = (self.conf_bias, self.diff_weights, self.diff_bias,
                  self.trust_weights, self.trust_bias, self.token_vector)
        if any(len(f) != levels for f in fields):
            raise UacError("per-level parameter tuples must share length")
        for w in self.diff_weights:
            if len(w) != c + 2:
                raise UacError(f"diff weights must have length {c + 2}")
        for w in self.trust_weights:
            if w.shape != (3, 3, c + 1):
                raise UacError(f"trust weights must be (3, 3, {c + 1})")
        nr = len(self.refine_weights)
        if self.refine_offset_net.shape != (2 * nr, c):
            raise UacError(f"refine_offset_net must be ({2 * nr}, {c})")
        for m in (self.token_query, self.token_key, self.token_value):
            if m.shape != (c, c):
                raise UacError("token projections must be (C, C)")
        if self.epsilon <= 0:
            raise UacError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return len(self.conf_weights[0])

    @property
    def levels(self) -> int:
        return len(self.conf_weights)

    @classmethod
    def neutral(cls, channels: int, levels: int,
                refine_points: int = DEFAULT_REFINE_POINTS) -> "UacParams":
        """All-zero heads: confidence and trust sit at 0.5, demand splits evenly."""
        return cls(
            conf_weights=tuple(np.zeros(channels) for _ in range(levels)),
            conf_bias=tuple(0.0 for _ in range(levels)),
            diff_weights=tuple(np.zeros(channels + 2) for _ in range(levels)),
            diff_bias=tuple(0.0 for _ in range(levels)),
            trust_weights=tuple(np.zeros((3, 3, channels + 1)) for _ in range(levels)),
            trust_bias=tuple(0.0 for _ in range(levels)),
            refine_offset_net=np.zeros((2 * refine_points, channels)),
            refine_weights=np.full(refine_points, 1.0 / refine_points),
            token_vector=tuple(np.zeros(channels) for _ in range(levels)),
            token_query=np.zeros((channels, channels)),
            token_key=np.zeros((channels, channels)),
            token_value=np.zeros((channels, channels)),
        )

    @classmethod
    def seeded(cls, channels: int, levels: int,
               refine_points: int = DEFAULT_REFINE_POINTS, seed: int = 0,
               scale: float = 0.1) -> "UacParams":
        rng = np.random.default_rng(seed)
        v = rng.uniform(0.2, 1.0, refine_points)
        return cls(
            conf_weights=tuple(rng.normal(0, scale, channels) for _ in range(levels)),
            conf_bias=tuple(float(rng.normal(0, scale)) for _ in range(levels)),
            diff_weights=tuple(rng.normal(0, scale, channels + 2) for _ in range(levels)),
            diff_bias=tuple(float(rng.normal(0, scale)) for _ in range(levels)),
            trust_weights=tuple(rng.normal(0, scale, (3, 3, channels + 1))
                                for _ in range(levels)),
            trust_bias=tuple(float(rng.normal(0, scale)) for _ in range(levels)),
            refine_offset_net=rng.normal(0, scale * 5, (2 * refine_points, channels)),
            refine_weights=v / v.sum(),
            token_vector=tuple(rng.normal(0, 1.0, channels) for _ in range(levels)),
            token_query=rng.normal(0, scale, (channels, channels)),
            token_key=rng.normal(0, scale, (channels, channels)),
            token_value=rng.normal(0, scale, (channels, channels)),
        )

    @classmethod
    def oracle(cls, channels: int, levels: int,
               refine_points: int = DEFAULT_REFINE_POINTS) -> "UacParams":
        """Hand-set heads exploiting the channel convention.

        Confidence reads the occupancy channel (last feature channel);
        demand rises where the ego is uncertain and the source confident;
        trust maps demand through a steep center-tap gate. The agent token
        averages residual features (identity value projection).
        """
        base = cls.neutral(channels, levels, refine_points)
        conf_w = []
        for _ in range(levels):
            w = np.zeros(channels)
            w[channels - 1] = 4.0
            conf_w.append(w)
        diff_w = []
        for _ in range(levels):
            w = np.zeros(channels + 2)
            w[channels] = 1.0      # ego uncertainty
            w[channels + 1] = 1.0  # source confidence
            diff_w.append(w)
        trust_w = []
        for _ in range(levels):
            w = np.zeros((3, 3, channels + 1))
            w[1, 1, channels] = 4.0
            trust_w.append(w)
        return cls(
            conf_weights=tuple(conf_w),
            conf_bias=tuple(-2.0 for _ in range(levels)),
            diff_weights=tuple(diff_w),
            diff_bias=tuple(0.0 for _ in range(levels)),
            trust_weights=tuple(trust_w),
            trust_bias=tuple(-4.0 for _ in range(levels)),
            refine_offset_net=base.refine_offset_net,
            refine_weights=base.refine_weights,
            token_vector=base.token_vector,
            token_query=base.token_query,
            token_key=base.token_key,
            token_value=np.eye(channels),
        )


@dataclass(frozen=True, eq=False)
class DemandMap:
    """Per-source demand weights for one ego at one level; ego source first."""

    level: int
    source_ids: tuple[int, ...]
    weights: np.ndarray  # (S, H, W) float64

    def __post_init__(self):
        if self.weights.shape[0] != len(self.source_ids):
            raise UacError("one weight plane per source required")
        arr = np.array(self.weights, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "weights", arr)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    def for_source(self, source_id: int) -> np.ndarray:
        return self.weights[self.source_ids.index(source_id)]


@dataclass(frozen=True)
class TokenSelection:
    """Top-K cell indices of one demand slice, in transmission order."""

    rows: np.ndarray
    cols: np.ndarray
    ratio: float
    grid_shape: tuple[int, int]

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int32, copy=True)
        cols = np.array(self.cols, dtype=np.int32, copy=True)
        if rows.shape != cols.shape:
            raise UacError("rows and cols must align")
        rows.flags.writeable = False
        cols.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def count(self) -> int:
        return len(self.rows)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid_shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m


def confidence_map(feat: BevGrid, params: UacParams, level: int) -> BevGrid:
    """Per-cell confidence in (0, 1), in the feature grid's own frame."""
    if feat.channels != params.channels:
        raise UacError("feature channels do not match params")
    logits = feat.data.astype(np.float64) @ params.conf_weights[level] \
        + params.conf_bias[level]
    return BevGrid(ops.sigmoid(logits)[:, :, None].astype(np.float32),
                   feat.cell_size, feat.origin)


def demand_weights(ego_feat: BevGrid, ego_conf: BevGrid,
                   neighbor_confs: dict[int, BevGrid], params: UacParams,
                   level: int, ego_id: int = 0) -> DemandMap:
    """Normalized per-cell demand for the ego and each aligned source.

    For source k: a demand response D_k is a linear read of (ego features,
    ego uncertainty, source confidence); trust is sigma of a 3x3 convolution
    over (ego features | D_k); weights are trust normalized per cell with the
    epsilon guard, so they sum to S / (S + eps) < 1.
    """
    if ego_conf.channels != 1:
        raise UacError("confidence grids must have one channel")
    feat = ego_feat.data.astype(np.float64)
    conf = ego_conf.data[:, :, 0].astype(np.float64)
    unc = 1.0 - conf
    dw = params.diff_weights[level]
    w_feat, w_unc, w_conf = dw[:-2], dw[-2], dw[-1]
    feat_term = feat @ w_feat + params.diff_bias[level]

    source_ids = [ego_id] + sorted(neighbor_confs)
    trust = []
    for sid in source_ids:
        src_conf = conf if sid == ego_id else \
            neighbor_confs[sid].data[:, :, 0].astype(np.float64)
        demand = feat_term + w_unc * unc + w_conf * src_conf
        stacked = np.concatenate([feat, demand[:, :, None]], axis=2)
        logit = ops.conv3x3(stacked, params.trust_weights[level],
                            params.trust_bias[level])
        trust.append(ops.sigmoid(logit))
    trust_arr = np.stack(trust)
    weights = trust_arr / (trust_arr.sum(axis=0) + params.epsilon)
    return DemandMap(level, tuple(source_ids), weights)


def select_tokens(weights: np.ndarray, ratio: float) -> TokenSelection:
    """Exactly ceil(ratio * H * W) cells by descending weight.

    Ties resolve by ascending row-major index, which makes the selection
    deterministic and independent of evaluation order.
    """
    if not 0.0 < ratio <= 1.0:
        raise UacError(f"ratio must be in (0, 1], got {ratio}")
    weights = np.asarray(weights, dtype=np.float64)
    h, w = weights.shape
    k = math.ceil(ratio * h * w)
    order = np.argsort(-weights.ravel(), kind="stable")[:k]
    return TokenSelection(order // w, order % w, float(ratio), (h, w))


def refine_tokens(feat: BevGrid, selection: TokenSelection,
                  params: UacParams) -> np.ndarray:
    """Deformable residual refinement of the selected token features.

    Each selected cell gathers ``Nr`` bilinear samples at learned offsets
    (clamped to +/-3 cells) and adds the weighted sum to its own feature
    vector. Returns a (K, C) float64 array in selection order; the grid
    itself is left untouched.
    """
    if feat.channels != params.channels:
        raise UacError("feature channels do not match params")
    base = feat.data[selection.rows, selection.cols].astype(np.float64)
    nr = len(params.refine_weights)
    offsets = (base @ params.refine_offset_net.T).reshape(-1, nr, 2)
    offsets = np.clip(offsets, -REFINE_CLAMP_CELLS, REFINE_CLAMP_CELLS)
    gathered = np.zeros_like(base)
    for n in range(nr):
        xs = selection.cols.astype(np.float64) + offsets[:, n, 0]
        ys = selection.rows.astype(np.float64) + offsets[:, n, 1]
        gathered += params.refine_weights[n] * bilinear_many(feat.data, xs, ys)
    return base + gathered


def agent_token(feat: BevGrid, selection: TokenSelection, params: UacParams,
                level: int) -> np.ndarray:
    """Single summary vector over the cells that were not selected.

    One query (projected from the level's token vector) attends over the
    residual cell features with scaled dot-product attention. When every cell
    was selected there is nothing to summarize and the token is zero.
    """
    if feat.channels != params.channels:
        raise UacError("feature channels do not match params")
    residual = ~selection.mask()
    if not residual.any():
        return np.zeros(params.channels)
    f_res = feat.data[residual].astype(np.float64)
    q = params.token_query @ params.token_vector[level]
    keys = f_res @ params.token_key.T
    values = f_res @ params.token_value.T
    logits = keys @ q / math.sqrt(params.channels)
    logits -= logits.max()
    alpha = np.exp(logits)
    alpha /= alpha.sum()
    return alpha @ values


def warmup_ratio(epoch: int, warm_epochs: int, target: float) -> float:
    """Linear keep-ratio schedule: 1.0 at epoch 0 down to ``target``.

    The ratio decreases by (1 - target) / warm_epochs per epoch and stays at
    ``target`` from ``warm_epochs`` onwards.
    """
    if epoch < 0:
        raise UacError("epoch must be non-negative")
    if warm_epochs < 1:
        raise UacError("warm_epochs must be at least 1")
    if not 0.0 < target <= 1.0:
        raise UacError(f"target ratio must be in (0, 1], got {target}")
    if epoch >= warm_epochs:
        return float(target)
    return 1.0 - (epoch / warm_epochs) * (1.0 - target)
