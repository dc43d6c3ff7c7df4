"""Radar-camera collaborative perception over bandwidth-limited links.

The package simulates a small team of agents that sense a shared scene,
rectify camera features with radar geometry, exchange sparse BEV tokens
under a byte budget, and fuse what arrives into per-ego detections.
"""

from .cda import CdaParams, assemble_tokens, consensus_map, unpack_and_fuse
from .comm import (BASE_UNIT_BYTES, BudgetLedger, ChannelModel, RequestMessage,
                   TokenMessage, deserialize, serialize)
from .config import (ConfigError, ExperimentConfig, default_config,
                     load_config, override)
from .detect import AnchorConfig, Detection, decode, score_map
from .geometry import OrientedBox, Pose2, nms, rotated_iou, warp_grid
from .grid import BevGrid, FeaturePyramid, GridSpec, bilinear_sample, build_pyramid
from .gsr import GsrParams, camera_lift, gated_calibrate, rectify
from .objective import MetricsReport, acc_at_t, evaluate, focal_loss
from .pipeline import PipelineParams, ego_frame, local_products, run_frame
from .runner import run_ablation, run_scenario, run_sweep
from .scene import (AgentSpec, CameraConfig, RadarConfig, World, WorldConfig,
                    generate_world, sense_camera, sense_radar)
from .uac import UacParams, demand_weights, refine_tokens, select_tokens

__version__ = "0.1.0"

__all__ = [
    "AgentSpec", "AnchorConfig", "BASE_UNIT_BYTES", "BevGrid", "BudgetLedger",
    "CameraConfig", "CdaParams", "ChannelModel", "ConfigError", "Detection",
    "ExperimentConfig", "FeaturePyramid", "GridSpec", "GsrParams",
    "MetricsReport", "OrientedBox", "PipelineParams", "Pose2", "RadarConfig",
    "RequestMessage", "TokenMessage", "UacParams", "World", "WorldConfig",
    "acc_at_t", "assemble_tokens", "bilinear_sample", "build_pyramid",
    "camera_lift", "consensus_map", "decode", "default_config",
    "demand_weights", "deserialize", "ego_frame", "evaluate", "focal_loss",
    "gated_calibrate", "generate_world", "load_config", "local_products",
    "nms", "override", "rectify", "refine_tokens", "rotated_iou",
    "run_ablation", "run_frame", "run_scenario", "run_sweep", "score_map",
    "select_tokens", "sense_camera", "sense_radar", "serialize",
    "unpack_and_fuse", "warp_grid",
]
