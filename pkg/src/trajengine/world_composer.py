"""Composition of camera trajectory and body-in-camera state into world motion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModelDef, BodyParams, forward
from .errors import FrameMismatch, OutOfRange
from .geometry import SE3Pose, compose, quat_multiply


@dataclass
class Trajectory:
    """Ordered pose samples: (frame index, timestamp seconds, SE3Pose)."""

    frames: np.ndarray  # (N,) int, strictly increasing
    times: np.ndarray  # (N,) s, strictly increasing
    poses: list[SE3Pose]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.frames) != len(self.poses) or len(self.times) != len(self.poses):
            raise FrameMismatch("frames/times/poses lengths differ")
        if len(self.frames) > 1:
            if np.any(np.diff(self.frames) <= 0) or np.any(np.diff(self.times) <= 0):
                raise ValueError("frame indices and timestamps must strictly increase")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.trans for p in self.poses])


@dataclass
class WorldMotion:
    root: Trajectory  # world-frame root poses H_t
    body: list[BodyParams]  # per-frame body state, root lifted to world
    joints_world: np.ndarray  # (N, J, 3) m

    def __post_init__(self):
        if len(self.root) != len(self.body) or len(self.joints_world) != len(self.body):
            raise FrameMismatch("root/body/joints frame counts differ")


def compose_world(G: Trajectory, T: list[SE3Pose], body: list[BodyParams],
                  model: BodyModelDef) -> WorldMotion:
    """World root trajectory H_t = G_t o T_t plus world-frame joints.

    G must already be metric-scaled. Joints are computed with zero root
    parameters and then carried by H_t.
    """
    if len(G) != len(T) or len(G) != len(body):
        raise FrameMismatch(f"{len(G)} camera poses vs {len(T)} body poses")
    H = [compose(g, t) for g, t in zip(G.poses, T)]
    root = Trajectory(G.frames.copy(), G.times.copy(), H)
    joints_world = []
    body_world = []
    for h, params in zip(H, body):
        j0, _ = forward(model, BodyParams(params.theta, params.beta,
                                          np.zeros(3), np.zeros(3)))
        joints_world.append(h.apply(j0))
        body_world.append(params)
    return WorldMotion(root, body_world, np.stack(joints_world))


def _slerp(qa, qb, t: float):
    d = float(np.dot(qa, qb))
    if d < 0:
        qb, d = -qb, -d
    d = min(d, 1.0)
    if d > 1.0 - 1e-12:
        q = (1 - t) * qa + t * qb
        return q / np.linalg.norm(q)
    ang = np.arccos(d)
    return (np.sin((1 - t) * ang) * qa + np.sin(t * ang) * qb) / np.sin(ang)


def interpolate_poses(traj: Trajectory, frame) -> SE3Pose:
    """Pose at an arbitrary frame index: slerp rotation, lerp translation."""
    f = float(frame)
    if f < traj.frames[0] or f > traj.frames[-1]:
        raise OutOfRange(f"frame {frame} outside [{traj.frames[0]}, {traj.frames[-1]}]")
    hi = int(np.searchsorted(traj.frames, f, side="left"))
    if traj.frames[hi] == f:
        return traj.poses[hi]
    lo = hi - 1
    a, b = traj.poses[lo], traj.poses[hi]
    t = (f - traj.frames[lo]) / (traj.frames[hi] - traj.frames[lo])
    return SE3Pose(_slerp(a.quat, b.quat, t), (1 - t) * a.trans + t * b.trans)
