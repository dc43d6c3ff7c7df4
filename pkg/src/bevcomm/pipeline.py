"""End-to-end frame processing: sense, rectify, exchange tokens, fuse, detect.

The pipeline is deliberately split so a runner can parallelize the per-ego
stage: :func:`local_products` builds every agent's own-frame products once,
then :func:`ego_frame` consumes them read-only for one ego. All channel
randomness is keyed by link and send time, so results do not depend on the
order egos are processed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import cda, comm, detect, gsr, uac
from .cda import CdaParams, ConsensusMap, NeighborTokens
from .comm import ChannelModel, RequestMessage, TokenMessage
from .config import ExperimentConfig
from .detect import AnchorConfig, Detection, ScoreGrid
from .geometry import Pose2, warp_grid
from .grid import BevGrid, FeaturePyramid, GridSpec, build_pyramid, downsample
from .gsr import GsrParams
from .objective import UacLevelInputs
from .scene import (RADAR_CHANNELS, RADAR_OCC, AgentSpec, PolarFeatureMap,
                    RadarReturns, World, rasterize_radar, sense_camera,
                    sense_radar)
from .uac import UacParams


class PipelineError(ValueError):
    """Raised for inconsistent pipeline inputs."""


class BudgetExceededError(RuntimeError):
    """Raised when accounted traffic passes the configured hard cap."""


@dataclass(frozen=True, eq=False)
class PipelineParams:
    """All module parameters plus the detection head settings."""

    gsr: GsrParams
    uac: UacParams
    cda: CdaParams
    anchors: AnchorConfig = AnchorConfig()
    fuse_weights: tuple[float, ...] | None = None
    beta: float = 4.0
    # Weight on the range-support channel when scoring. Signature match decides
    # the yaw bin; this term breaks placement ties between adjacent cells
    # toward the one holding range-measured support.
    occupancy_weight: float = 2.0

    @classmethod
    def oracle(cls, channels: int, levels: int, image_channels: int,
               sharpen_sigma_m: float = 2.0) -> "PipelineParams":
        """Hand-set weights that realize each module's intended behavior."""
        return cls(
            gsr=GsrParams.oracle(channels, RADAR_CHANNELS, image_channels,
                                 sharpen_sigma_m=sharpen_sigma_m),
            uac=UacParams.oracle(channels, levels),
            cda=CdaParams.oracle(RADAR_CHANNELS),
        )

    @classmethod
    def neutral(cls, channels: int, levels: int, image_channels: int
                ) -> "PipelineParams":
        return cls(
            gsr=GsrParams.neutral(channels, RADAR_CHANNELS, image_channels),
            uac=UacParams.neutral(channels, levels),
            cda=CdaParams.neutral(RADAR_CHANNELS),
        )

    @classmethod
    def seeded(cls, channels: int, levels: int, image_channels: int,
               seed: int = 0) -> "PipelineParams":
        """Small random weights, as an untrained system would start with."""
        return cls(
            gsr=GsrParams.seeded(channels, RADAR_CHANNELS, image_channels,
                                 seed=seed),
            uac=UacParams.seeded(channels, levels, seed=seed),
            cda=CdaParams.seeded(RADAR_CHANNELS, seed=seed),
        )


@dataclass(frozen=True, eq=False)
class LocalProducts:
    """Everything one agent computes from its own sensors, in its own frame."""

    agent: AgentSpec
    t_ms: int
    returns: RadarReturns
    polar: PolarFeatureMap
    radar_pyramid: tuple[BevGrid, ...]
    features: FeaturePyramid
    confidence: tuple[BevGrid, ...]
    occupancy: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class EgoResult:
    """One ego's fused output and the traffic it took to get there."""

    ego_id: int
    detections: list[Detection]
    fused: BevGrid
    scores: ScoreGrid
    traffic: tuple[tuple[int, int, int], ...]  # (sender, receiver, nbytes)
    neighbor_ids: tuple[int, ...]
    uac_inputs: tuple[UacLevelInputs, ...]


def grid_spec(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec.centered(cfg.grid.height, cfg.grid.width,
                             cfg.grid.cell_size_m)


def occupancy_raster(world: World, t_ms: float, spec: GridSpec,
                     pose: Pose2) -> np.ndarray:
    """Binary (H, W) map of cells whose center lies inside any object box."""
    xs, ys = np.meshgrid(np.arange(spec.width), np.arange(spec.height))
    local = np.stack([spec.origin[0] + xs * spec.cell_size,
                      spec.origin[1] + ys * spec.cell_size], axis=-1)
    pts = local.reshape(-1, 2) @ pose.rotation().T + np.array([pose.x, pose.y])
    inside = np.zeros(len(pts), dtype=bool)
    for box in world.boxes_at(t_ms):
        rel = pts - np.array([box.cx, box.cy])
        cs, sn = math.cos(box.yaw), math.sin(box.yaw)
        u = rel[:, 0] * cs + rel[:, 1] * sn
        v = -rel[:, 0] * sn + rel[:, 1] * cs
        inside |= (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2)
    return inside.reshape(spec.height, spec.width).astype(np.float64)


def _level_spec(spec: GridSpec, level: int) -> GridSpec:
    factor = 2 ** level
    shift = (factor - 1) / 2.0 * spec.cell_size
    return GridSpec(spec.height // factor, spec.width // factor,
                    spec.cell_size * factor,
                    (spec.origin[0] + shift, spec.origin[1] + shift))


def _with_energy_evidence(grid: BevGrid) -> BevGrid:
    """Add camera response energy to the occupancy channel.

    The confidence head reads the last channel, so without this a camera-only
    agent would report uniform confidence and demand ranking would degenerate
    to index order.
    """
    data = grid.data.astype(np.float64)
    energy = np.clip(np.linalg.norm(data[:, :, :-1], axis=2), 0.0, 1.0)
    data[:, :, -1] += energy
    return grid.with_data(data.astype(np.float32))


def _base_features(polar: PolarFeatureMap, returns: RadarReturns,
                   raster: BevGrid, spec: GridSpec, params: PipelineParams,
                   variant: str) -> BevGrid:
    """Level-0 BEV features for one agent under the configured variant."""
    if variant == "radar-only":
        data = np.zeros((spec.height, spec.width, params.gsr.channels),
                        dtype=np.float32)
        data[:, :, -1] = raster.data[:, :, RADAR_OCC]
        return BevGrid(data, spec.cell_size, spec.origin)
    if variant in ("camera-only", "no-gsr"):
        return _with_energy_evidence(gsr.camera_lift(polar, spec, params.gsr))
    if params.gsr.sharpen_sigma_m > 0.0:
        polar = gsr.sharpen_depth(polar, returns, params.gsr.sharpen_sigma_m)
    f_cam = gsr.camera_lift(polar, spec, params.gsr)
    queries = gsr.init_queries(f_cam, raster, params.gsr)
    f_rect = gsr.rectify(queries, polar, params.gsr)
    return _with_energy_evidence(gsr.gated_calibrate(f_rect, raster, params.gsr))


def local_products(world: World, agent: AgentSpec, cfg: ExperimentConfig,
                   params: PipelineParams, t_ms: int) -> LocalProducts:
    """Sense and featurize one agent at one instant."""
    spec = grid_spec(cfg)
    returns = sense_radar(world, agent, cfg.radar, t_ms)
    polar = sense_camera(world, agent, cfg.camera, t_ms)
    raster = rasterize_radar(returns, spec)
    base = _base_features(polar, returns, raster, spec, params,
                          cfg.pipeline.variant)
    pyramid = build_pyramid(base, cfg.grid.levels)
    radar_pyr = [raster]
    for _ in range(1, cfg.grid.levels):
        radar_pyr.append(downsample(radar_pyr[-1], 2))
    conf = tuple(uac.confidence_map(pyramid.levels[l], params.uac, l)
                 for l in range(cfg.grid.levels))
    occ = tuple(occupancy_raster(world, t_ms, _level_spec(spec, l), agent.pose)
                for l in range(cfg.grid.levels))
    return LocalProducts(agent, int(t_ms), returns, polar, tuple(radar_pyr),
                         pyramid, conf, occ)


def _constant_consensus(template: BevGrid, level: int) -> ConsensusMap:
    values = np.full((template.height, template.width, 1),
                     cda.AGENT_TOKEN_PRIOR, dtype=np.float32)
    return ConsensusMap(level, BevGrid(values, template.cell_size,
                                       template.origin))


def _roundtrip(msg: TokenMessage | RequestMessage,
               grid_shape: tuple[int, int]) -> None:
    """Serialize and parse back; any field change is an internal error."""
    back = comm.deserialize(comm.serialize(msg), grid_shape)
    same = (back.sender == msg.sender and back.receiver == msg.receiver
            and back.level == msg.level
            and back.timestamp_ms == msg.timestamp_ms
            and np.array_equal(back.rows, msg.rows)
            and np.array_equal(back.cols, msg.cols))
    if same and isinstance(msg, TokenMessage):
        same = (np.array_equal(back.features, msg.features)
                and np.array_equal(back.agent_token, msg.agent_token)
                and np.array_equal(back.confidence, msg.confidence)
                and np.array_equal(back.consensus, msg.consensus))
    if not same:
        raise PipelineError("wire round trip changed a message")


def channel_model(cfg: ExperimentConfig, seed: int) -> ChannelModel:
    return ChannelModel(
        latency_ms=int(round(cfg.channel.latency_ms)),
        drop_prob=cfg.channel.drop_prob,
        sigma_xy_m=cfg.channel.sigma_xy_m,
        sigma_yaw_rad=cfg.channel.sigma_yaw_rad,
        seed=seed,
    )


def ego_frame(world: World, cfg: ExperimentConfig, params: PipelineParams,
              ego_id: int, products_now: dict[int, LocalProducts],
              products_stale: dict[int, LocalProducts],
              channel: ChannelModel, t_ms: int) -> EgoResult:
    """Collaborative perception for one ego at one instant.

    Neighbor content is stale by the channel latency and aligned with the
    noisy pose the channel delivered; a dropped link removes that neighbor
    from the frame entirely, including its demand share and its bytes.
    """
    ego = products_now[ego_id]
    variant = cfg.pipeline.variant
    send_time = int(t_ms) - channel.latency_ms
    # Disabling consensus means a flat prior for every token, the agent
    # token included; dropping the radar (camera-only) only flattens the
    # radar-derived cell priors and keeps the configured agent prior.
    token_params = params.cda
    if variant == "no-consensus":
        token_params = replace(params.cda,
                               agent_token_prior=cda.AGENT_TOKEN_PRIOR)

    links: list[tuple[int, Pose2]] = []
    for nid in sorted(products_stale):
        if nid == ego_id:
            continue
        nb = products_stale[nid]
        dropped, dx, dy, dyaw = channel.link_draws(nid, ego_id, send_time)
        if dropped:
            continue
        pose = nb.agent.pose
        links.append((nid, Pose2(pose.x + dx, pose.y + dy, pose.yaw + dyaw)))

    traffic: list[tuple[int, int, int]] = []
    fused_levels: list[BevGrid] = []
    uac_inputs: list[UacLevelInputs] = []
    for level in range(cfg.grid.levels):
        ego_feat = ego.features.levels[level]
        ego_conf = ego.confidence[level]
        warped_confs = {
            nid: warp_grid(products_stale[nid].confidence[level], pose,
                           ego.agent.pose)
            for nid, pose in links}
        demand = uac.demand_weights(ego_feat, ego_conf, warped_confs,
                                    params.uac, level, ego_id=ego_id)
        neighbors: list[NeighborTokens] = []
        aligned_confs = [ego_conf.data[:, :, 0].astype(np.float64)]
        demand_planes = [demand.for_source(ego_id)]
        consensus_planes: list[np.ndarray] = []
        for nid, noisy_pose in links:
            nb = products_stale[nid]
            selection = uac.select_tokens(demand.for_source(nid),
                                          cfg.comm.ratio)
            request = RequestMessage(ego_id, nid, level, int(t_ms),
                                     selection.rows, selection.cols)
            _roundtrip(request, ego_feat.data.shape[:2])
            traffic.append((ego_id, nid, request.nbytes()))

            aligned = warp_grid(nb.features.levels[level], noisy_pose,
                                ego.agent.pose)
            refined = uac.refine_tokens(aligned, selection, params.uac)
            agent_tok = None if variant == "no-agent-token" else \
                uac.agent_token(aligned, selection, params.uac, level)
            if variant in ("no-consensus", "camera-only"):
                src_consensus = _constant_consensus(ego_feat, level)
                consensus = src_consensus
            else:
                src_consensus = cda.consensus_map(nb.radar_pyramid[level],
                                                  params.cda, noisy_pose,
                                                  ego.agent.pose, level)
                consensus = cda.corroborate(src_consensus,
                                            ego.radar_pyramid[level],
                                            params.cda,
                                            cfg.world.sensing_radius_m)
            logits = nb.radar_pyramid[level].data.astype(np.float64) \
                @ params.cda.consensus_weights
            message = TokenMessage(
                sender=nid, receiver=ego_id, level=level,
                timestamp_ms=send_time,
                rows=selection.rows, cols=selection.cols,
                features=refined.astype(np.float32),
                agent_token=np.zeros(ego_feat.channels, dtype=np.float32)
                if agent_tok is None else agent_tok.astype(np.float32),
                confidence=nb.confidence[level].data[:, :, 0],
                consensus=logits.astype(np.float32),
            )
            _roundtrip(message, ego_feat.data.shape[:2])
            traffic.append((nid, ego_id, message.nbytes()))

            # The receiver works from what arrived, so assembly reads the
            # float32 wire features rather than the sender's float64 copies.
            tokens = cda.assemble_tokens(cda.compose_tokens(
                message.features,
                None if agent_tok is None else message.agent_token,
                consensus, selection, token_params))
            neighbors.append(NeighborTokens(selection, tokens,
                                            demand.for_source(nid),
                                            has_agent_token=agent_tok is not None))
            aligned_confs.append(warped_confs[nid].data[:, :, 0].astype(np.float64))
            demand_planes.append(demand.for_source(nid))
            consensus_planes.append(src_consensus.plane())
        fused_levels.append(cda.unpack_and_fuse(ego_feat, neighbors,
                                                demand.for_source(ego_id)))
        uac_inputs.append(UacLevelInputs(
            local_confs=[ego_conf.data[:, :, 0].astype(np.float64)]
            + [products_stale[nid].confidence[level].data[:, :, 0].astype(np.float64)
               for nid, _ in links],
            local_occs=[ego.occupancy[level]]
            + [products_stale[nid].occupancy[level] for nid, _ in links],
            aligned_confs=aligned_confs,
            demand=demand_planes,
            consensus=consensus_planes,
            ego_occ=ego.occupancy[level],
        ))

    fused = cda.fuse_pyramid(fused_levels, params.fuse_weights)
    scores = detect.score_map(fused, world.bank, params.anchors,
                              beta=params.beta,
                              occupancy_weight=params.occupancy_weight,
                              support_channel=fused.channels - 2)
    detections = detect.decode(scores, params.anchors, ego.agent.pose)
    return EgoResult(ego_id, detections, fused, scores, tuple(traffic),
                     tuple(nid for nid, _ in links), tuple(uac_inputs))


@dataclass(frozen=True, eq=False)
class FrameResult:
    """All egos' results for one instant plus the shared local products."""

    t_ms: int
    products: dict[int, LocalProducts]
    egos: list[EgoResult]

    @property
    def total_bytes(self) -> int:
        return sum(n for result in self.egos for _, _, n in result.traffic)


def run_frame(world: World, cfg: ExperimentConfig, params: PipelineParams,
              t_ms: int = 0, ego_ids: list[int] | None = None,
              ego_map=map) -> FrameResult:
    """Process one frame for every requested ego.

    ``ego_map`` allows a runner to substitute a thread-pool map; the per-ego
    stage only reads shared products, so any execution order gives identical
    results.
    """
    agents = {a.agent_id: a for a in world.agents}
    if ego_ids is None:
        ego_ids = sorted(agents)
    unknown = [e for e in ego_ids if e not in agents]
    if unknown:
        raise PipelineError(f"unknown ego ids {unknown}")
    channel = channel_model(cfg, world.seed)
    now = {aid: local_products(world, agents[aid], cfg, params, t_ms)
           for aid in sorted(agents)}
    if channel.latency_ms == 0:
        stale = now
    else:
        stale_t = int(t_ms) - channel.latency_ms
        stale = {aid: local_products(world, agents[aid], cfg, params, stale_t)
                 for aid in sorted(agents)}
    egos = list(ego_map(
        lambda eid: ego_frame(world, cfg, params, eid, now, stale, channel,
                              int(t_ms)),
        ego_ids))
    return FrameResult(int(t_ms), now, egos)
