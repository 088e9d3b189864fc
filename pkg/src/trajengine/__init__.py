"""Metric-scale global trajectory engine.

Recovers camera trajectories from dense flow with dynamic-region
masking, restores metric scale robustly from noisy depth, and lifts
per-frame body motion into a shared world frame, with a synthetic
scene generator and a full evaluation suite.
"""

from .geometry import PinholeIntrinsics, SE3Pose, compose, se3_exp, se3_log
from .dba import (FlowEdge, FrameGraph, Keyframe, SolverOptions, SolveStats,
                  apply_dual_mask, residuals, solve)
from .metric_scale import (MetricDepthFrame, ScaleEstimate, ScaleOptions,
                           estimate_frame_scale, estimate_sequence_scale,
                           pseudo_rgbd_baseline, rescale)
from .world_composer import Trajectory, WorldMotion, compose_world
from .metrics import MetricsReport, ate, mpjpe_family, umeyama_align
from .scene_sim import NoiseSpec, PathSpec, SceneSpec, SimBundle, generate, preset

__version__ = "0.1.0"
