"""Synthetic ground-truth scene generator.

Replaces the learned front-ends: emits exact reprojection flows from
per-keyframe depth fields and known camera motion, plus a moving "human"
blob, walking body ground truth, noisy metric depth, and masks. All
randomness flows from one seeded generator, so the same spec reproduces a
bit-identical bundle.

The emitted FrameGraph is in solver units (metric geometry divided by the
true scale); metric ground truth is carried separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .body_model import BodyModelDef, BodyParams, make_synthetic_model
from .dba import FlowEdge, FrameGraph, Keyframe, grid_pixels
from .errors import EmptyScene
from .geometry import (PinholeIntrinsics, SE3Pose, backproject, compose,
                       project, so3_log)
from .metric_scale import MetricDepthFrame
from .world_composer import Trajectory


@dataclass
class PathSpec:
    kind: str = "line"  # line | arc | circle | stairs | static
    start: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)
    speed: float = 1.0  # m/s
    radius: float = 4.0
    center: tuple = (0.0, 0.0, 0.0)
    step_len: float = 0.6
    step_h: float = 0.18


@dataclass
class SceneSpec:
    seed: int = 0
    frame_count: int = 8
    fps: float = 10.0
    width: int = 128
    height: int = 96
    focal: float = 120.0
    stride: int = 8
    camera: PathSpec = field(default_factory=PathSpec)
    depth_min: float = 3.0
    depth_max: float = 9.0
    sky_rows: int = 0  # top grid rows at sky depth
    sky_depth: float = 20.0
    dynamic_frac: float = 0.0  # fraction of grid cells covered by the blob
    dynamic_velocity: tuple = (0.4, 0.0, 0.0)  # m/s, world frame
    dynamic_depth: float = 3.0  # m in front of the camera
    human: PathSpec | None = None
    edge_radius: int = 2
    true_scale: float = 1.0


@dataclass
class NoiseSpec:
    flow_sigma: float = 0.0  # px
    confidence_mode: str = "oracle"  # oracle | uniform (both emit w = 1)
    depth_bias_sigma: float = 0.0  # lognormal per-frame scale
    depth_shift: float = 0.0  # m
    sky_under_factor: float = 1.0  # multiplier on far-band depth, < 1 underestimates
    sky_threshold: float = 15.0  # m, start of the far band
    gross_bias_frames: int = 0
    gross_bias_factor: float = 5.0
    dynamic_mode: str = "corrupt_background"  # corrupt_background | clean_background
    contamination: float = 0.05  # bleed of dynamic motion into background flow
    # when emulating the unmasked front-end (context features see the mover)

    def __post_init__(self):
        if self.flow_sigma < 0 or self.depth_bias_sigma < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if self.confidence_mode not in ("oracle", "uniform"):
            raise ValueError(f"unknown confidence mode {self.confidence_mode!r}")
        if self.dynamic_mode not in ("corrupt_background", "clean_background"):
            raise ValueError(f"unknown dynamic mode {self.dynamic_mode!r}")


@dataclass
class SimBundle:
    spec: SceneSpec
    noise: NoiseSpec
    graph: FrameGraph  # solver units, flows per noise spec, GT poses/depths
    gt_cam: Trajectory  # metric world-from-camera
    gt_root: Trajectory | None  # human world root H_t
    rel_poses: list | None  # T_t = G_t^-1 o H_t
    body_params: list | None
    joints_world: np.ndarray | None
    verts_world: np.ndarray | None
    body_model: BodyModelDef | None
    metric_depths: list  # MetricDepthFrame per keyframe
    gt_depth_metric: np.ndarray  # (N, rows, cols)
    true_scale: float

    def background_flow(self, i: int, j: int) -> np.ndarray:
        """Exact background flow field (rows, cols, 2) from frame i to j."""
        K = self.graph.intrinsics
        pix = grid_pixels(K, self.graph.stride)
        rows, cols = self.graph.grid_shape
        A = compose(self.gt_cam.poses[j].inverse(), self.gt_cam.poses[i])
        X = backproject(K, pix, self.gt_depth_metric[i].reshape(-1))
        return (project(K, A.apply(X)) - pix).reshape(rows, cols, 2)

    def mean_background_flow(self, i: int, j: int) -> float:
        flow = self.background_flow(i, j)
        mask = self.graph.keyframes[i].mask
        mags = np.linalg.norm(flow, axis=-1)[~mask]
        return float(np.mean(mags)) if mags.size else 0.0


def _look_rotation(forward, up=np.array([0.0, 0.0, 1.0])):
    """World-from-camera rotation with camera z along `forward`, y down."""
    z = np.asarray(forward, dtype=np.float64)
    n = np.linalg.norm(z)
    if n < 1e-12:
        z = np.array([1.0, 0.0, 0.0])
    else:
        z = z / n
    if abs(np.dot(z, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def path_pose(spec: PathSpec, t: float) -> SE3Pose:
    """World pose along a parametric path at time t, facing the tangent."""
    if spec.kind == "static":
        return SE3Pose.from_rotation_translation(
            _look_rotation(spec.direction), spec.start)
    if spec.kind == "line":
        d = np.asarray(spec.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        p = np.asarray(spec.start) + spec.speed * t * d
        return SE3Pose.from_rotation_translation(_look_rotation(d), p)
    if spec.kind in ("arc", "circle"):
        w = spec.speed / spec.radius
        phi = w * t
        c = np.asarray(spec.center, dtype=np.float64)
        p = c + spec.radius * np.array([math.cos(phi), math.sin(phi), 0.0])
        tangent = np.array([-math.sin(phi), math.cos(phi), 0.0])
        return SE3Pose.from_rotation_translation(_look_rotation(tangent), p)
    if spec.kind == "stairs":
        d = np.asarray(spec.direction, dtype=np.float64)
        d[2] = 0.0
        d = d / np.linalg.norm(d)
        s = spec.speed * t
        p = np.asarray(spec.start) + s * d
        p = p + np.array([0.0, 0.0, -spec.step_h * math.floor(s / spec.step_len)])
        return SE3Pose.from_rotation_translation(_look_rotation(d), p)
    raise ValueError(f"unknown path kind {spec.kind!r}")


def _dynamic_cells(rows, cols, frac, center_rc):
    """Row-major blob of round(frac * rows * cols) cells around a center."""
    n = int(round(frac * rows * cols))
    if n <= 0:
        return np.zeros((rows, cols), dtype=bool)
    n = min(n, rows * cols)
    # rectangle with roughly the grid's aspect ratio
    a = max(1, int(round(math.sqrt(n * rows / cols))))
    b = max(1, int(math.ceil(n / a)))
    a = min(a, rows)
    b = min(b, cols)
    while a * b < n:
        if a < rows:
            a += 1
        elif b < cols:
            b += 1
        else:
            break
    r0 = int(np.clip(center_rc[0] - a // 2, 0, rows - a))
    c0 = int(np.clip(center_rc[1] - b // 2, 0, cols - b))
    mask = np.zeros((rows, cols), dtype=bool)
    flat = [(r0 + i, c0 + j) for i in range(a) for j in range(b)][:n]
    for r, c in flat:
        mask[r, c] = True
    return mask


def corrupt_depth(D_true, noise: NoiseSpec, bias: float,
                  dynamic_mask=None) -> MetricDepthFrame:
    """Apply the per-frame depth corruption model to a true metric depth grid."""
    D_true = np.asarray(D_true, dtype=np.float64)
    D = bias * D_true + noise.depth_shift
    far = D_true >= noise.sky_threshold
    D[far] *= noise.sky_under_factor
    valid = D > 0
    if dynamic_mask is not None:
        valid &= ~dynamic_mask
    return MetricDepthFrame(D, valid)


def _body_params_at(model: BodyModelDef, t: float) -> BodyParams:
    J = model.joint_count
    theta = np.zeros((J - 1, 3))
    for k in range(J - 1):
        theta[k, 2] = 0.25 * math.sin(2.0 * math.pi * 0.5 * t + k)
    return BodyParams(theta, np.zeros(model.shape_count), np.zeros(3), np.zeros(3))


def generate(spec: SceneSpec, noise: NoiseSpec | None = None) -> SimBundle:
    """Build a complete simulation bundle from a scene and noise spec."""
    noise = noise or NoiseSpec()
    if spec.frame_count < 1:
        raise EmptyScene("frame_count < 1")
    rows, cols = spec.height // spec.stride, spec.width // spec.stride
    if rows < 1 or cols < 1:
        raise EmptyScene("grid is empty at this stride")
    if spec.true_scale <= 0:
        raise ValueError("true_scale must be positive")
    rng = np.random.default_rng(spec.seed)
    N = spec.frame_count
    M = rows * cols
    K = PinholeIntrinsics(spec.focal, spec.focal, spec.width / 2.0,
                          spec.height / 2.0, spec.width, spec.height)
    pix = grid_pixels(K, spec.stride)
    times = np.arange(N) / spec.fps

    poses_m = [path_pose(spec.camera, t) for t in times]  # metric world-from-camera

    # true metric background depth per frame
    gt_depth = rng.uniform(spec.depth_min, spec.depth_max, (N, rows, cols))
    if spec.sky_rows > 0:
        gt_depth[:, :spec.sky_rows, :] = spec.sky_depth

    # dynamic blob: a billboard at fixed camera depth moving through the world
    masks = np.zeros((N, rows, cols), dtype=bool)
    dyn_world = None
    if spec.dynamic_frac > 0:
        v = np.asarray(spec.dynamic_velocity, dtype=np.float64)
        # anchor the blob in front of the first camera
        c0 = poses_m[0].apply(np.array([0.0, 0.0, spec.dynamic_depth]))
        dyn_world = [c0 + v * t for t in times]
        for f in range(N):
            Xc = poses_m[f].inverse().apply(dyn_world[f])
            if Xc[2] > 0.1:
                uv = project(K, Xc)
                rc = (int(uv[1] // spec.stride), int(uv[0] // spec.stride))
            else:
                rc = (rows // 2, cols // 2)
            masks[f] = _dynamic_cells(rows, cols, spec.dynamic_frac, rc)

    # edges and flows
    edges = []
    for i in range(N):
        for j in range(N):
            if i == j or abs(i - j) > spec.edge_radius:
                continue
            A = compose(poses_m[j].inverse(), poses_m[i])
            X = backproject(K, pix, gt_depth[i].reshape(M))
            flow = (project(K, A.apply(X)) - pix).reshape(rows, cols, 2)
            if dyn_world is not None and noise.dynamic_mode == "corrupt_background":
                dyn = masks[i].reshape(M)
                if np.any(dyn):
                    Xd = backproject(K, pix[dyn],
                                     np.full(int(dyn.sum()), spec.dynamic_depth))
                    Xw = poses_m[i].apply(Xd) + \
                        np.asarray(spec.dynamic_velocity) * (times[j] - times[i])
                    Xj = poses_m[j].inverse().apply(Xw)
                    ok = Xj[:, 2] > 0.1
                    dflow = np.zeros((int(dyn.sum()), 2))
                    if np.any(ok):
                        dflow[ok] = project(K, Xj[ok]) - pix[dyn][ok]
                    fl = flow.reshape(M, 2)
                    fl[dyn] = dflow
                    # the mover also contaminates the front-end's context
                    # features, bleeding its motion into background flow
                    if noise.contamination > 0 and np.any(ok):
                        bleed = np.mean(dflow[ok], axis=0)
                        fl[~dyn] = ((1.0 - noise.contamination) * fl[~dyn]
                                    + noise.contamination * bleed)
                    flow = fl.reshape(rows, cols, 2)
            if noise.flow_sigma > 0:
                flow = flow + rng.normal(0.0, noise.flow_sigma, flow.shape)
            conf = np.ones((rows, cols, 2))
            edges.append(FlowEdge(i, j, flow, conf))

    # solver-unit graph with ground-truth state
    kfs = [Keyframe(i, gt_depth[i] / spec.true_scale, masks[i]) for i in range(N)]
    poses_s = [SE3Pose(p.quat, p.trans / spec.true_scale) for p in poses_m]
    graph = FrameGraph(K, spec.stride, kfs, edges, poses_s, list(times))

    # noisy metric depth channel
    gross = set()
    if noise.gross_bias_frames > 0:
        gross = set(rng.choice(N, size=min(noise.gross_bias_frames, N),
                               replace=False).tolist())
    metric_depths = []
    for f in range(N):
        bias = 1.0
        if noise.depth_bias_sigma > 0:
            bias = float(np.exp(rng.normal(0.0, noise.depth_bias_sigma)))
        if f in gross:
            bias *= noise.gross_bias_factor
        metric_depths.append(corrupt_depth(gt_depth[f], noise, bias, masks[f]))

    gt_cam = Trajectory(np.arange(N), times, poses_m)

    gt_root = rel_poses = body_params = None
    joints_world = verts_world = None
    model = None
    if spec.human is not None:
        model = make_synthetic_model(seed=spec.seed)
        H = [path_pose(spec.human, t) for t in times]
        gt_root = Trajectory(np.arange(N), times, H)
        rel_poses = [compose(g.inverse(), h) for g, h in zip(poses_m, H)]
        body_params, jw, vw = [], [], []
        from .body_model import forward  # local import avoids cycle at module load
        for f in range(N):
            base = _body_params_at(model, times[f])
            T = rel_poses[f]
            params = BodyParams(base.theta, base.beta,
                                so3_log(T.rotation_matrix), T.trans)
            body_params.append(params)
            j0, v0 = forward(model, base)
            jw.append(H[f].apply(j0))
            vw.append(H[f].apply(v0))
        joints_world = np.stack(jw)
        verts_world = np.stack(vw)

    return SimBundle(spec, noise, graph, gt_cam, gt_root, rel_poses, body_params,
                     joints_world, verts_world, model, metric_depths, gt_depth,
                     spec.true_scale)


def perturb_poses(graph: FrameGraph, rot_sigma: float, trans_sigma: float,
                  seed: int = 0) -> FrameGraph:
    """Gaussian se3 perturbation of every pose except the anchor."""
    from .geometry import se3_exp

    rng = np.random.default_rng(seed)
    out = graph.copy()
    for k in range(1, len(out.poses)):
        xi = np.concatenate([rng.normal(0, trans_sigma, 3), rng.normal(0, rot_sigma, 3)])
        out.poses[k] = compose(out.poses[k], se3_exp(xi))
    return out


def reset_depths(graph: FrameGraph, value: float | None = None) -> FrameGraph:
    """Replace all keyframe depths by a constant (median by default)."""
    out = graph.copy()
    if value is None:
        value = float(np.median(np.stack([kf.depth for kf in out.keyframes])))
    for kf in out.keyframes:
        kf.depth = np.full_like(kf.depth, value)
    return out


# ------------------------------------------------------------------ presets

PRESETS = {
    "line-clean": lambda seed: (
        SceneSpec(seed=seed, frame_count=8,
                  camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8)),
        NoiseSpec()),
    "circle-dynamic-30pct": lambda seed: (
        SceneSpec(seed=seed, frame_count=8, dynamic_frac=0.30,
                  camera=PathSpec(kind="circle", radius=4.0, speed=1.0)),
        NoiseSpec(flow_sigma=0.02, contamination=0.1)),
    "stairs-walk": lambda seed: (
        SceneSpec(seed=seed, frame_count=12,
                  camera=PathSpec(kind="stairs", start=(0, 0, 1.6), speed=0.9),
                  human=PathSpec(kind="stairs", start=(1.5, 0.3, 0.9), speed=0.9)),
        NoiseSpec()),
    "walk-scaled": lambda seed: (
        SceneSpec(seed=seed, frame_count=10, true_scale=1.7,
                  camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8),
                  human=PathSpec(kind="line", start=(2.0, 0.5, 0.9), speed=0.8)),
        NoiseSpec(depth_bias_sigma=0.15, gross_bias_frames=2)),
}


def preset(name: str, seed: int = 0):
    try:
        return PRESETS[name](seed)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None
