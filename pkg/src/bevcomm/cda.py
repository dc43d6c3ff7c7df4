"""Consensus-driven assembly of received tokens into the ego's feature maps.

Radar rasters vote a per-cell reliability (the consensus map, warped into the
ego frame). Token matrices from each neighbor are re-aggregated by content
attention biased by that reliability, unpacked back onto the ego grid at
their selection indices, and blended with the ego's own features using the
demand weights. A final convex merge collapses the pyramid to full resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import Pose2, warp_grid
from .grid import BevGrid
from .scene import RADAR_OCC
from .uac import TokenSelection

AGENT_TOKEN_PRIOR = 0.5
# Sink prior used by the oracle head. Rows whose content matches nothing in
# particular then fall back toward the near-empty agent-wise summary instead
# of a coherent blend of every strong token, which would land
# score-competitive junk on all content-free selected cells. Kept below
# M·AGENT_TOKEN_PRIOR for the default selection so corroborated tokens come
# through stronger than a flat prior would leave them, not just contradicted
# ones weaker.
AGENT_TOKEN_SINK_PRIOR = 400.0
DEFAULT_FUSE_WEIGHTS_L3 = (0.5, 0.3, 0.2)


class CdaError(ValueError):
    """Raised for malformed assembly inputs."""


@dataclass(frozen=True, eq=False)
class CdaParams:
    """Consensus head weights and the fixed agent-token prior."""

    consensus_weights: np.ndarray  # (C_rad,)
    consensus_bias: float
    agent_token_prior: float = AGENT_TOKEN_PRIOR

    def __post_init__(self):
        if not self.agent_token_prior > 0.0:
            raise CdaError("agent_token_prior must be positive")

    @classmethod
    def neutral(cls, radar_channels: int) -> "CdaParams":
        return cls(np.zeros(radar_channels), 0.0)

    @classmethod
    def seeded(cls, radar_channels: int, seed: int = 0, scale: float = 0.5) -> "CdaParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, scale, radar_channels), float(rng.normal(0, scale)))

    @classmethod
    def oracle(cls, radar_channels: int) -> "CdaParams":
        """Hand-set head: reliability follows radar occupancy.

        Radar-backed cells map to sigmoid(2), everything else to sigmoid(-2),
        so a cell's reliability moves a fixed logit step for measured
        occupancy and the no-evidence value stays well below one half. The
        agent token carries the sink prior so content-free rows drain to the
        near-empty summary instead of a coherent blend of strong tokens.
        """
        w = np.zeros(radar_channels)
        w[RADAR_OCC] = 4.0
        return cls(w, -2.0, agent_token_prior=AGENT_TOKEN_SINK_PRIOR)


@dataclass(frozen=True, eq=False)
class ConsensusMap:
    """Per-cell reliability in (0, 1) for one source at one level, ego-aligned."""

    level: int
    values: BevGrid  # single channel

    def __post_init__(self):
        if self.values.channels != 1:
            raise CdaError("consensus map must have one channel")

    def plane(self) -> np.ndarray:
        return self.values.data[:, :, 0].astype(np.float64)

    def at(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.values.data[rows, cols, 0].astype(np.float64)


def consensus_map(f_rad: BevGrid, params: CdaParams, src_pose: Pose2,
                  ego_pose: Pose2, level: int = 0) -> ConsensusMap:
    """Reliability map from a source's radar raster, aligned to the ego.

    The linear response is warped before the bias and sigmoid are applied, so
    cells warped in from outside the source extent land at sigmoid(bias), the
    head's no-evidence value, rather than an artificial zero.
    """
    if f_rad.channels != len(params.consensus_weights):
        raise CdaError("radar channels do not match consensus weights")
    response = f_rad.data.astype(np.float64) @ params.consensus_weights
    logit_grid = BevGrid(response[:, :, None].astype(np.float32),
                         f_rad.cell_size, f_rad.origin)
    aligned = warp_grid(logit_grid, src_pose, ego_pose)
    values = ops.sigmoid(aligned.data[:, :, 0].astype(np.float64) + params.consensus_bias)
    return ConsensusMap(level, BevGrid(values[:, :, None].astype(np.float32),
                                       f_rad.cell_size, f_rad.origin))


CORROBORATION_CONTRAST = 1.0


def corroborate(consensus: ConsensusMap, witness: BevGrid, params: CdaParams,
                radius_m: float,
                contrast: float = CORROBORATION_CONTRAST) -> ConsensusMap:
    """Discount a source's reliability where the receiver's radar disagrees.

    The receiver evaluates its own raster with the same head and multiplies
    the source's aligned map by that response raised to ``contrast``, but
    only inside the receiver's sensing radius: beyond it silence is lack of
    coverage, not evidence, and the source's value passes through unchanged.

    The contrast exponent sets how hard a contradiction lands relative to
    the head's own calibration. One applies the witness response as-is;
    higher values widen the prior gap between corroborated and contradicted
    claims but also strip the diffuse mass around a claim's peak, which the
    pooled scorer would otherwise integrate.

    The witness raster must be in the receiver's frame with the receiver at
    the local origin, on the same grid as the consensus map.
    """
    if witness.channels != len(params.consensus_weights):
        raise CdaError("witness channels do not match consensus weights")
    if contrast < 0.0:
        raise CdaError("contrast must be non-negative")
    plane = consensus.plane()
    if witness.data.shape[:2] != plane.shape:
        raise CdaError("witness grid does not match the consensus map")
    response = witness.data.astype(np.float64) @ params.consensus_weights
    own = ops.sigmoid(response + params.consensus_bias) ** contrast
    xs = witness.origin[0] + np.arange(witness.width) * witness.cell_size
    ys = witness.origin[1] + np.arange(witness.height) * witness.cell_size
    covered = (xs[None, :] ** 2 + ys[:, None] ** 2) <= radius_m ** 2
    combined = plane * np.where(covered, own, 1.0)
    return ConsensusMap(consensus.level,
                        BevGrid(combined[:, :, None].astype(np.float32),
                                witness.cell_size, witness.origin))


@dataclass(frozen=True, eq=False)
class TokenMatrix:
    """Token features with per-token consensus priors."""

    features: np.ndarray  # (M, C) float64
    prior: np.ndarray     # (M,) float64, strictly positive

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2:
            raise CdaError(f"token features must be (M, C), got shape {feats.shape}")
        prior = np.array(self.prior, dtype=np.float64, copy=True).reshape(-1)
        if len(feats) != len(prior):
            raise CdaError("one prior per token required")
        if len(prior) and prior.min() <= 0.0:
            raise CdaError("token priors must be strictly positive")
        feats.flags.writeable = False
        prior.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "prior", prior)

    @property
    def count(self) -> int:
        return len(self.prior)


def compose_tokens(refined: np.ndarray, agent_tok: np.ndarray | None,
                   consensus: ConsensusMap, selection: TokenSelection,
                   params: CdaParams) -> TokenMatrix:
    """Stack selected tokens (plus optional agent token) with their priors.

    Cell tokens read their prior from the consensus map at their own index;
    the agent token has no location, so it carries the fixed prior.
    """
    priors = consensus.at(selection.rows, selection.cols)
    feats = np.asarray(refined, dtype=np.float64)
    if agent_tok is not None:
        feats = np.vstack([feats, np.asarray(agent_tok, dtype=np.float64)])
        priors = np.concatenate([priors, [params.agent_token_prior]])
    return TokenMatrix(feats, priors)


def assemble_tokens(tokens: TokenMatrix) -> TokenMatrix:
    """Consensus-biased content attention across one source's tokens.

    Row a of the attention matrix is softmax over b of
    (x_a . x_b) / sqrt(C) + log g_b; the output is that mixture applied to
    the token features. Implemented multiplicatively (exp of row-centered
    content logits times the prior, normalized), which is algebraically the
    same and keeps a constant prior exactly equivalent to no prior.
    """
    m, c = tokens.features.shape
    if m == 0:
        return tokens
    x = tokens.features
    logits = x @ x.T / math.sqrt(c)
    logits = logits - logits.max(axis=1, keepdims=True)
    numer = np.exp(logits) * tokens.prior[None, :]
    attn = numer / numer.sum(axis=1, keepdims=True)
    return TokenMatrix(attn @ x, tokens.prior)


@dataclass(frozen=True, eq=False)
class NeighborTokens:
    """One neighbor's contribution at one level, ready to unpack."""

    selection: TokenSelection
    tokens: TokenMatrix
    demand: np.ndarray          # (H, W) float64
    has_agent_token: bool = True

    @property
    def cell_tokens(self) -> np.ndarray:
        """Token rows that correspond to grid cells (agent token excluded)."""
        if self.has_agent_token:
            return self.tokens.features[:-1]
        return self.tokens.features


def unpack_and_fuse(ego_feat: BevGrid, neighbors: list[NeighborTokens],
                    ego_demand: np.ndarray) -> BevGrid:
    """Demand-weighted blend of ego features and unpacked neighbor tokens.

    Each neighbor's cell tokens scatter to their selection indices on an
    otherwise-zero grid; the agent-wise token is attention context only and
    is never broadcast spatially. Output(p) = W_ego(p) * ego(p) +
    sum_j W_j(p) * U_j(p).
    """
    h, w, c = ego_feat.data.shape
    out = np.asarray(ego_demand, dtype=np.float64)[:, :, None] \
        * ego_feat.data.astype(np.float64)
    for nb in neighbors:
        cell_tokens = nb.cell_tokens
        if len(cell_tokens) != nb.selection.count:
            raise CdaError(f"token count {len(cell_tokens)} does not match "
                           f"selection of {nb.selection.count}")
        unpacked = np.zeros((h, w, c))
        unpacked[nb.selection.rows, nb.selection.cols] = cell_tokens
        out += np.asarray(nb.demand, dtype=np.float64)[:, :, None] * unpacked
    return ego_feat.with_data(out.astype(np.float32))


def default_fuse_weights(levels: int) -> tuple[float, ...]:
    """Finest-heavy convex weights; the three-level default is (0.5, 0.3, 0.2)."""
    if levels == 3:
        return DEFAULT_FUSE_WEIGHTS_L3
    raw = [2.0 ** -l for l in range(levels)]
    total = sum(raw)
    return tuple(r / total for r in raw)


def fuse_pyramid(levels: list[BevGrid], weights: tuple[float, ...] | None = None
                 ) -> BevGrid:
    """Collapse a pyramid to level-0 resolution by nearest-neighbor upsampling
    and a convex per-level weighting."""
    if not levels:
        raise CdaError("fuse_pyramid needs at least one level")
    if weights is None:
        weights = default_fuse_weights(len(levels))
    if len(weights) != len(levels):
        raise CdaError("one weight per level required")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise CdaError("fuse weights must be convex (non-negative, sum to 1)")
    base = levels[0]
    out = np.zeros(base.data.shape)
    for l, grid in enumerate(levels):
        factor = base.height // grid.height
        if (grid.height * factor, grid.width * factor) != (base.height, base.width):
            raise CdaError(f"level {l} dimensions do not divide level 0")
        up = grid.data.astype(np.float64)
        if factor > 1:
            up = np.repeat(np.repeat(up, factor, axis=0), factor, axis=1)
        out += w[l] * up
    return base.with_data(out.astype(np.float32))
