"""Trajectory and body-motion evaluation metrics.

Conventions:
  - ATE: RMSE of camera positions after closed-form similarity alignment;
    ATE-S aligns rigidly, so scale errors of a metric prediction remain.
  - MPJPE/PVE: root-aligned per frame; PA-MPJPE uses per-frame Procrustes
    with scale. Outputs in mm.
  - W-MPJPE_100 / WA-MPJPE_100: world joints over 100-frame segments after
    rigid alignment from the first two frames / the whole segment.
  - RTE / ROE / ERVE: whole-trajectory errors after first-frame root
    alignment. ERVE velocity is each frame's root displacement expressed
    in that frame's own root coordinates, in mm/frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfiguration, FrameMismatch, ShapeMismatch,
                     TimestampMismatch, TooShort)
from .geometry import SE3Pose, compose, rotation_geodesic_deg, so3_exp
from .world_composer import Trajectory, WorldMotion


@dataclass
class MetricsReport:
    """Named scalar results; fields left None were not evaluated."""

    ate_m: float | None = None
    ate_s_m: float | None = None
    pa_mpjpe_mm: float | None = None
    mpjpe_mm: float | None = None
    pve_mm: float | None = None
    accel_m_s2: float | None = None
    w_mpjpe100_mm: float | None = None
    wa_mpjpe100_mm: float | None = None
    rte_m: float | None = None
    roe_deg: float | None = None
    erve_mm_per_frame: float | None = None
    frames: int = 0
    segments: int = 0

    _UNITS = {
        "ate_m": "m", "ate_s_m": "m", "pa_mpjpe_mm": "mm", "mpjpe_mm": "mm",
        "pve_mm": "mm", "accel_m_s2": "m/s^2", "w_mpjpe100_mm": "mm",
        "wa_mpjpe100_mm": "mm", "rte_m": "m", "roe_deg": "deg",
        "erve_mm_per_frame": "mm/frame", "frames": "count", "segments": "count",
    }

    def to_dict(self):
        return {k: getattr(self, k) for k in self._UNITS if getattr(self, k) is not None}

    def to_text(self) -> str:
        lines = []
        for k in self._UNITS:
            v = getattr(self, k)
            if v is None:
                continue
            if isinstance(v, int):
                lines.append(f"{k} {v} {self._UNITS[k]}")
            else:
                lines.append(f"{k} {v:.9g} {self._UNITS[k]}")
        return "\n".join(lines) + "\n"


def umeyama_align(src, dst, with_scale: bool = True):
    """Closed-form least-squares similarity (or rigid) transform src -> dst.

    Returns (s, R, t) minimizing sum ||s R src + t - dst||^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 3:
        raise DegenerateConfiguration("need matching point sets with >= 3 points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    ds, dd = src - mu_s, dst - mu_d
    var_s = np.sum(ds * ds) / len(src)
    if var_s < 1e-18:
        raise DegenerateConfiguration("source points are coincident")
    cov = dd.T @ ds / len(src)
    U, sv, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(sv * np.diag(S)) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate(pred: Trajectory, gt: Trajectory, use_estimated_scale: bool = False) -> float:
    """RMSE of camera positions after alignment.

    use_estimated_scale=False: similarity alignment (classic ATE).
    use_estimated_scale=True: rigid alignment of the already-metric
    prediction (ATE-S).
    """
    if len(pred) != len(gt) or not np.allclose(pred.times, gt.times, atol=1e-9):
        raise TimestampMismatch("trajectories have different timestamps")
    P, Q = pred.positions(), gt.positions()
    s, R, t = umeyama_align(P, Q, with_scale=not use_estimated_scale)
    res = s * P @ R.T + t - Q
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def mpjpe_family(pred_joints, gt_joints, mode: str = "mpjpe", root_index: int = 0,
                 joint_subset=None) -> float:
    """Per-frame joint/vertex error in mm.

    mpjpe: root-aligned mean joint distance; pa_mpjpe: per-frame Procrustes
    with scale; pve: identical math applied to vertices (root_index still
    names the root joint column used for alignment of vertex arrays whose
    first rows are joints; for plain vertex arrays the first row is used).
    """
    P = np.asarray(pred_joints, dtype=np.float64)
    Q = np.asarray(gt_joints, dtype=np.float64)
    if P.shape != Q.shape:
        raise ShapeMismatch(f"{P.shape} vs {Q.shape}")
    if P.ndim == 2:
        P, Q = P[None], Q[None]
    if joint_subset is not None and mode != "pve":
        P, Q = P[:, joint_subset], Q[:, joint_subset]
    errs = []
    for p, q in zip(P, Q):
        if mode == "pa_mpjpe":
            s, R, t = umeyama_align(p, q, with_scale=True)
            p = s * p @ R.T + t
        else:
            p = p - p[root_index]
            q = q - q[root_index]
        errs.append(np.mean(np.linalg.norm(p - q, axis=1)))
    return float(np.mean(errs) * 1000.0)


def accel_error(pred_joints, gt_joints, fps: float) -> float:
    """Mean norm of the joint acceleration difference, m/s^2."""
    P = np.asarray(pred_joints, dtype=np.float64)
    Q = np.asarray(gt_joints, dtype=np.float64)
    if P.shape != Q.shape:
        raise ShapeMismatch(f"{P.shape} vs {Q.shape}")
    if len(P) < 3:
        raise TooShort("need >= 3 frames for second differences")
    if fps <= 0:
        raise ValueError("fps must be positive")
    ap = (P[2:] - 2 * P[1:-1] + P[:-2]) * fps * fps
    aq = (Q[2:] - 2 * Q[1:-1] + Q[:-2]) * fps * fps
    return float(np.mean(np.linalg.norm(ap - aq, axis=-1)))


def _segment_error(pj, gj, variant: str) -> float:
    n = len(pj)
    k = 2 if variant == "first_two" else n
    src = pj[:k].reshape(-1, 3)
    dst = gj[:k].reshape(-1, 3)
    _, R, t = umeyama_align(src, dst, with_scale=False)
    aligned = pj @ R.T + t
    return float(np.mean(np.linalg.norm(aligned - gj, axis=-1)))


def w_mpjpe_100(pred: WorldMotion, gt: WorldMotion, variant: str = "first_two",
                segment_len: int = 100) -> float:
    """World-frame joint error over consecutive fixed-length segments, mm."""
    if variant not in ("first_two", "whole_segment"):
        raise ValueError(f"unknown variant {variant!r}")
    pj, gj = pred.joints_world, gt.joints_world
    if pj.shape != gj.shape:
        raise FrameMismatch(f"{pj.shape} vs {gj.shape}")
    n = len(pj)
    if n < 2:
        raise TooShort("need >= 2 frames")
    errs = []
    for start in range(0, n, segment_len):
        seg_p, seg_g = pj[start:start + segment_len], gj[start:start + segment_len]
        if len(seg_p) < 2:
            continue  # trailing single frame: no alignment possible
        errs.append(_segment_error(seg_p, seg_g, variant))
    return float(np.mean(errs) * 1000.0)


def _yaw_of(R, up=np.array([0.0, 0.0, 1.0])):
    # heading of the rotated x-axis about the up axis
    x = R @ np.array([1.0, 0.0, 0.0])
    x = x - np.dot(x, up) * up
    n = np.linalg.norm(x)
    if n < 1e-12:
        return 0.0
    x /= n
    ref = np.array([1.0, 0.0, 0.0])
    ang = np.arctan2(np.dot(np.cross(ref, x), up), np.dot(ref, x))
    return float(ang)


def first_frame_alignment(pred: Trajectory, gt: Trajectory,
                          mode: str = "se3") -> SE3Pose:
    """Transform W with W o pred_0 matching gt_0 (exactly for se3; position
    plus heading only for yaw)."""
    if mode == "se3":
        return compose(gt.poses[0], pred.poses[0].inverse())
    if mode != "yaw":
        raise ValueError(f"unknown alignment mode {mode!r}")
    up = np.array([0.0, 0.0, 1.0])
    dyaw = _yaw_of(gt.poses[0].rotation_matrix) - _yaw_of(pred.poses[0].rotation_matrix)
    R = so3_exp(dyaw * up)
    t = gt.poses[0].trans - R @ pred.poses[0].trans
    return SE3Pose.from_rotation_translation(R, t)


def global_traj_metrics(pred: WorldMotion, gt: WorldMotion,
                        alignment: str = "se3"):
    """(RTE m, ROE deg, ERVE mm/frame) after first-frame root alignment."""
    if len(pred.root) != len(gt.root) or len(pred.root) < 2:
        raise FrameMismatch("trajectories must match and have >= 2 frames")
    W = first_frame_alignment(pred.root, gt.root, alignment)
    pp = [compose(W, p) for p in pred.root.poses]
    gp = gt.root.poses

    pos_p = np.stack([p.trans for p in pp])
    pos_g = np.stack([p.trans for p in gp])
    rte = float(np.mean(np.linalg.norm(pos_p - pos_g, axis=1)))
    roe = float(np.mean([rotation_geodesic_deg(a, b) for a, b in zip(pp, gp)]))

    def ego_velocities(poses, pos):
        return np.stack([poses[t].rotation_matrix.T @ (pos[t + 1] - pos[t])
                         for t in range(len(pos) - 1)])

    vp = ego_velocities(pp, pos_p)
    vg = ego_velocities(gp, pos_g)
    erve = float(np.mean(np.linalg.norm(vp - vg, axis=1)) * 1000.0)
    return rte, roe, erve
