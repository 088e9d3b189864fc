"""SE(3)/SO(3) algebra and pinhole projection.

Conventions:
  - Quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0.
  - SE3Pose maps points as x_out = R x + t.
  - se3 tangent vectors are 6-vectors [rho, phi]: translation part first,
    rotation (axis-angle) part last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthBehindCamera, NonPositiveDepth

EPSILON_Z = 1e-6


def _quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return _quat_normalize(q)


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def so3_exp(phi):
    """Axis-angle 3-vector -> rotation matrix (Rodrigues)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-10:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation matrix -> axis-angle 3-vector. Handles the angle-pi branch
    with an eigen-axis extraction, where the standard formula degrades."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R) - 1.0) * 0.5
    c = min(1.0, max(-1.0, c))
    theta = np.arccos(c)
    if theta < 1e-10:
        # first-order: log(R) ~ vee(R - R^T)/2
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi: axis from the eigenvector of R for eigenvalue +1
        w, v = np.linalg.eigh((R + R.T) * 0.5)
        axis = v[:, np.argmax(w)]
        axis = axis / np.linalg.norm(axis)
        # fix axis sign so that exp matches R
        s_vec = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, s_vec) < 0.0:
            axis = -axis
        return theta * axis
    s_vec = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * s_vec


def _so3_left_jacobian(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def _so3_left_jacobian_inv(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = 1.0 / np.tan(half)
    a = (1.0 - half * cot) / (theta * theta)
    return np.eye(3) - 0.5 * K + a * (K @ K)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: rotation (unit quaternion wxyz) + translation (m)."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(self.quat))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3).copy())
        self.quat.setflags(write=False)
        self.trans.setflags(write=False)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T) -> "SE3Pose":
        T = np.asarray(T, dtype=np.float64)
        return SE3Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rotation_translation(R, t) -> "SE3Pose":
        return SE3Pose(matrix_to_quat(R), t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.trans
        return T

    def inverse(self) -> "SE3Pose":
        R = self.rotation_matrix
        return SE3Pose(matrix_to_quat(R.T), -R.T @ self.trans)

    def apply(self, points) -> np.ndarray:
        """Transform one 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.trans


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Composition a after b: (a o b)(x) = a(b(x))."""
    q = quat_multiply(a.quat, b.quat)
    t = quat_to_matrix(a.quat) @ b.trans + a.trans
    return SE3Pose(q, t)


def se3_exp(xi) -> SE3Pose:
    """Exponential map of a [rho, phi] tangent vector."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    R = so3_exp(phi)
    t = _so3_left_jacobian(phi) @ rho
    return SE3Pose(matrix_to_quat(R), t)


def se3_log(P: SE3Pose) -> np.ndarray:
    """Logarithm map; the documented near-pi branch lives in so3_log."""
    phi = so3_log(P.rotation_matrix)
    rho = _so3_left_jacobian_inv(phi) @ P.trans
    return np.concatenate([rho, phi])


def rotation_geodesic_deg(a: SE3Pose, b: SE3Pose) -> float:
    """Angle of the relative rotation between two poses, in [0, 180] deg."""
    d = abs(float(np.dot(a.quat, b.quat)))
    d = min(1.0, d)
    return float(np.degrees(2.0 * np.arccos(d)))


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


def project(K: PinholeIntrinsics, X) -> np.ndarray:
    """Pinhole projection of camera-frame point(s); X may be (3,) or (N, 3)."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    if np.any(z <= EPSILON_Z):
        raise DepthBehindCamera(f"point depth {np.min(z)} <= {EPSILON_Z}")
    u = K.fx * X[..., 0] / z + K.cx
    v = K.fy * X[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(K: PinholeIntrinsics, p, d) -> np.ndarray:
    """Lift pixel(s) p with depth(s) d to camera-frame 3D."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth(f"depth {np.min(d)} <= 0")
    x = (p[..., 0] - K.cx) * d / K.fx
    y = (p[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, d], axis=-1)
