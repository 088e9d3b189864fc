"""Configurable articulated body model.

Blendshapes + joint regressor + kinematic chain + linear blend skinning,
with the root orientation/translation applied last. A tiny synthetic model
ships with the repo for tests; a real model converted to the same file
format can be dropped in. Pose-dependent corrective blendshapes are not
modeled.

The forward pass is written against a pluggable array module (numpy by
default) so the loss module can differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NoVisibleVertices
from .geometry import EPSILON_Z, PinholeIntrinsics

MODEL_FORMAT_VERSION = 1


@dataclass
class BodyModelDef:
    parent: np.ndarray  # (J,) int, root has -1
    rest_joints: np.ndarray  # (J, 3) m
    rest_vertices: np.ndarray  # (V, 3) m
    skin_weights: np.ndarray  # (V, J), rows sum to 1
    shape_dirs: np.ndarray  # (V, 3, B)
    joint_regressor: np.ndarray  # (J, V), rows sum to 1

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        J, V = self.joint_count, self.vertex_count
        if self.skin_weights.shape != (V, J) or self.joint_regressor.shape != (J, V):
            raise DimensionMismatch("skin_weights/joint_regressor shapes inconsistent")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("skin_weights rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("joint_regressor rows must sum to 1")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError("parent array must have exactly one root")
        # acyclic: every joint must reach the root
        for k in range(J):
            seen, cur = set(), k
            while self.parent[cur] >= 0:
                if cur in seen:
                    raise ValueError("cycle in parent array")
                seen.add(cur)
                cur = int(self.parent[cur])

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def vertex_count(self) -> int:
        return len(self.rest_vertices)

    @property
    def shape_count(self) -> int:
        return self.shape_dirs.shape[2]

    def topological_order(self):
        order, placed = [], set()
        pending = list(range(self.joint_count))
        while pending:
            for k in pending:
                p = int(self.parent[k])
                if p < 0 or p in placed:
                    order.append(k)
                    placed.add(k)
                    pending.remove(k)
                    break
        return order


def _wrap_axis_angle(w):
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle >= 2.0 * np.pi:
        wrapped = np.mod(angle, 2.0 * np.pi)
        w = w * (wrapped / angle)
    return w


@dataclass
class BodyParams:
    """Per-frame body state: joint rotations, shape, root pose in camera frame."""

    theta: np.ndarray  # (J-1, 3) axis-angle
    beta: np.ndarray  # (B,)
    root_rot: np.ndarray  # (3,) axis-angle
    root_trans: np.ndarray  # (3,) m, camera frame

    def __post_init__(self):
        self.theta = np.array([_wrap_axis_angle(w) for w in np.atleast_2d(self.theta)],
                              dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.root_rot = _wrap_axis_angle(self.root_rot)
        self.root_trans = np.asarray(self.root_trans, dtype=np.float64).reshape(3)
        for arr in (self.theta, self.beta, self.root_rot, self.root_trans):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite body parameters")

    @staticmethod
    def zeros(model: BodyModelDef) -> "BodyParams":
        return BodyParams(np.zeros((model.joint_count - 1, 3)),
                          np.zeros(model.shape_count), np.zeros(3), np.zeros(3))


def _rodrigues_xp(w, xp):
    # branchless, differentiable at w = 0 (exact identity there)
    angle = xp.sqrt(xp.sum(w * w) + 1e-24)
    a = xp.sin(angle) / angle
    b = (1.0 - xp.cos(angle)) / (angle * angle)
    K = xp.array([[0.0, -w[2], w[1]],
                  [w[2], 0.0, -w[0]],
                  [-w[1], w[0], 0.0]])
    return xp.eye(3) + a * K + b * (K @ K)


def forward_xp(model: BodyModelDef, theta, beta, root_rot, root_trans, xp=np):
    """Differentiable forward kinematics; returns (joints, vertices)."""
    v_shaped = xp.asarray(model.rest_vertices) + xp.einsum(
        "vcb,b->vc", xp.asarray(model.shape_dirs), beta)
    j_shaped = xp.asarray(model.joint_regressor) @ v_shaped

    J = model.joint_count
    order = model.topological_order()
    R_g = [None] * J
    p_g = [None] * J
    for k in order:
        p = int(model.parent[k])
        if p < 0:
            R_g[k] = xp.eye(3)
            p_g[k] = j_shaped[k]
        else:
            Rk = _rodrigues_xp(theta[k - 1], xp)
            R_g[k] = R_g[p] @ Rk
            p_g[k] = R_g[p] @ (j_shaped[k] - j_shaped[p]) + p_g[p]
    joints_body = xp.stack(p_g)

    # LBS relative to the shaped rest pose
    Rg = xp.stack(R_g)  # (J, 3, 3)
    pg = joints_body
    rel = v_shaped[:, None, :] - j_shaped[None, :, :]  # (V, J, 3)
    per_joint = xp.einsum("jab,vjb->vja", Rg, rel) + pg[None, :, :]
    verts_body = xp.einsum("vj,vja->va", xp.asarray(model.skin_weights), per_joint)

    R_root = _rodrigues_xp(root_rot, xp)
    joints = joints_body @ R_root.T + root_trans
    verts = verts_body @ R_root.T + root_trans
    return joints, verts


def forward(model: BodyModelDef, params: BodyParams):
    """Joints and vertices in the camera frame for one set of parameters."""
    if params.theta.shape != (model.joint_count - 1, 3):
        raise DimensionMismatch(
            f"theta shape {params.theta.shape} != ({model.joint_count - 1}, 3)")
    if params.beta.shape != (model.shape_count,):
        raise DimensionMismatch(
            f"beta shape {params.beta.shape} != ({model.shape_count},)")
    return forward_xp(model, params.theta, params.beta,
                      params.root_rot, params.root_trans, xp=np)


def render_depth(model: BodyModelDef, params: BodyParams, K: PinholeIntrinsics,
                 splat_px: int = 2):
    """Point-splat z-buffer of the posed vertices.

    Each visible vertex writes its depth into a square splat of radius
    splat_px, keeping the minimum per pixel. Returns (depth, mask) at
    (height, width); unwritten pixels have depth 0 and mask False.
    """
    _, verts = forward(model, params)
    z = verts[:, 2]
    vis = z > EPSILON_Z
    if not np.any(vis):
        raise NoVisibleVertices("all vertices behind the camera")
    depth = np.full((K.height, K.width), np.inf)
    u = np.round(K.fx * verts[vis, 0] / z[vis] + K.cx).astype(int)
    v = np.round(K.fy * verts[vis, 1] / z[vis] + K.cy).astype(int)
    for uu, vv, zz in zip(u, v, z[vis]):
        r0, r1 = max(vv - splat_px, 0), min(vv + splat_px + 1, K.height)
        c0, c1 = max(uu - splat_px, 0), min(uu + splat_px + 1, K.width)
        if r0 >= r1 or c0 >= c1:
            continue
        patch = depth[r0:r1, c0:c1]
        np.minimum(patch, zz, out=patch)
    mask = np.isfinite(depth)
    if not np.any(mask):
        raise NoVisibleVertices("no vertex projects inside the image")
    depth[~mask] = 0.0
    return depth, mask


# ----------------------------------------------------------------- model I/O


def save_body_model(model: BodyModelDef, path):
    np.savez(path,
             version=np.int64(MODEL_FORMAT_VERSION),
             parents=model.parent,
             rest_joints=model.rest_joints,
             rest_vertices=model.rest_vertices,
             skin_weights=model.skin_weights,
             shape_dirs=model.shape_dirs,
             joint_regressor=model.joint_regressor)


def load_body_model(path) -> BodyModelDef:
    with np.load(path) as z:
        version = int(z["version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported body model version {version}")
        return BodyModelDef(z["parents"], z["rest_joints"], z["rest_vertices"],
                            z["skin_weights"], z["shape_dirs"], z["joint_regressor"])


def default_model() -> BodyModelDef:
    """The small body model shipped with the package."""
    from importlib import resources

    with resources.as_file(resources.files("trajengine") / "assets"
                           / "default_body.npz") as p:
        return load_body_model(p)


def make_synthetic_model(joint_count: int = 6, vertex_count: int = 40,
                         shape_count: int = 2, seed: int = 0) -> BodyModelDef:
    """Small deterministic test body: a spine chain with two arms."""
    rng = np.random.default_rng(seed)
    J, V, B = joint_count, vertex_count, shape_count
    parent = np.full(J, -1, dtype=np.int64)
    joints = np.zeros((J, 3))
    joints[0] = (0.0, 0.0, 0.0)
    for k in range(1, J):
        if k <= max(J - 3, 1):  # spine upward
            parent[k] = k - 1
            joints[k] = joints[k - 1] + (0.0, 0.25, 0.0)
        else:  # arms off the top spine joint
            top = max(J - 3, 1)
            parent[k] = top
            side = 1.0 if (k - top) % 2 else -1.0
            joints[k] = joints[top] + (side * 0.3, 0.05, 0.0)

    # vertices scattered around the bones
    verts = np.zeros((V, 3))
    bone = rng.integers(1, J, size=V)
    along = rng.uniform(0, 1, size=V)
    for i in range(V):
        k = bone[i]
        p = parent[k]
        verts[i] = joints[p] + along[i] * (joints[k] - joints[p]) + rng.normal(0, 0.04, 3)

    # skinning weights: soft assignment to the nearest joints
    d2 = np.sum((verts[:, None, :] - joints[None, :, :]) ** 2, axis=2)
    w = np.exp(-d2 / 0.02)
    skin = w / w.sum(axis=1, keepdims=True)

    # regressor: soft assignment of vertices to each joint
    r = np.exp(-d2.T / 0.01)
    reg = r / r.sum(axis=1, keepdims=True)
    shape_dirs = rng.normal(0, 0.03, (V, 3, B))

    # make the regressed rest joints exactly consistent with the rest pose
    rest_joints = reg @ verts
    return BodyModelDef(parent, rest_joints, verts, skin, shape_dirs, reg)
