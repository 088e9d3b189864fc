"""Hot per-cell reprojection kernels with two interchangeable backends.

The Gauss-Newton solver spends nearly all of its time evaluating, for every
edge and every grid cell, the reprojection residual and its Jacobians with
respect to the two incident poses and the cell's inverse depth. Two
implementations are provided:

  - "numba": explicit loops compiled with @njit (default when numba imports)
  - "numpy": fully vectorized fallback

Select with the environment variable ENGINE_KERNELS=numba|numpy. Both
backends return identical values (see tests/test_kernels.py);
benchmarks/bench_kernels.py compares their speed.

Jacobians are of the *predicted pixel* with respect to a right-multiplicative
se3 perturbation of the source pose (slot i), the destination pose (slot j),
and the source cell's inverse depth. Cells reprojecting behind the camera are
flagged invalid with zeroed outputs.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def active_backend() -> str:
    env = os.environ.get("ENGINE_KERNELS", "").strip().lower()
    if env in ("numba", "numpy"):
        if env == "numba" and not _HAVE_NUMBA:
            raise RuntimeError("ENGINE_KERNELS=numba but numba is unavailable")
        return env
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def _edge_terms_numpy(R_rel, t_rel, pnorm, invd, target, fx, fy, cx, cy, eps_z,
                      with_jac):
    E, M = invd.shape
    d = 1.0 / invd  # (E, M)
    dirs = np.concatenate([pnorm, np.ones((M, 1))], axis=1)  # (M, 3)
    Xi = dirs[None, :, :] * d[:, :, None]  # (E, M, 3)
    Xj = np.einsum("eab,emb->ema", R_rel, Xi) + t_rel[:, None, :]

    z = Xj[:, :, 2]
    valid = z > eps_z
    zs = np.where(valid, z, 1.0)

    u = fx * Xj[:, :, 0] / zs + cx
    v = fy * Xj[:, :, 1] / zs + cy
    r = target - np.stack([u, v], axis=-1)
    r[~valid] = 0.0
    if not with_jac:
        return r, valid, None, None, None

    # d(pixel)/d(Xj)
    Jproj = np.zeros((E, M, 2, 3))
    Jproj[:, :, 0, 0] = fx / zs
    Jproj[:, :, 0, 2] = -fx * Xj[:, :, 0] / (zs * zs)
    Jproj[:, :, 1, 1] = fy / zs
    Jproj[:, :, 1, 2] = -fy * Xj[:, :, 1] / (zs * zs)

    JR = np.einsum("emab,ebc->emac", Jproj, R_rel)  # (E,M,2,3)

    # source pose: d(Xj)/d(xi_i) = R [I | -skew(Xi)]
    Jpi = np.empty((E, M, 2, 6))
    Jpi[:, :, :, :3] = JR
    sk_i = np.zeros((E, M, 3, 3))
    sk_i[:, :, 0, 1] = -Xi[:, :, 2]
    sk_i[:, :, 0, 2] = Xi[:, :, 1]
    sk_i[:, :, 1, 0] = Xi[:, :, 2]
    sk_i[:, :, 1, 2] = -Xi[:, :, 0]
    sk_i[:, :, 2, 0] = -Xi[:, :, 1]
    sk_i[:, :, 2, 1] = Xi[:, :, 0]
    Jpi[:, :, :, 3:] = -np.einsum("emab,embc->emac", JR, sk_i)

    # destination pose: d(Xj)/d(xi_j) = [-I | skew(Xj)]
    Jpj = np.empty((E, M, 2, 6))
    Jpj[:, :, :, :3] = -Jproj
    sk_j = np.zeros((E, M, 3, 3))
    sk_j[:, :, 0, 1] = -Xj[:, :, 2]
    sk_j[:, :, 0, 2] = Xj[:, :, 1]
    sk_j[:, :, 1, 0] = Xj[:, :, 2]
    sk_j[:, :, 1, 2] = -Xj[:, :, 0]
    sk_j[:, :, 2, 0] = -Xj[:, :, 1]
    sk_j[:, :, 2, 1] = Xj[:, :, 0]
    Jpj[:, :, :, 3:] = np.einsum("emab,embc->emac", Jproj, sk_j)

    # inverse depth: d(Xi)/d(u) = -d^2 * dir
    dXdu = -(d * d)[:, :, None] * dirs[None, :, :]  # (E, M, 3)
    Jd = np.einsum("emab,emb->ema", JR, dXdu)

    inv = ~valid
    Jpi[inv] = 0.0
    Jpj[inv] = 0.0
    Jd[inv] = 0.0
    return r, valid, Jpi, Jpj, Jd


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _edge_terms_numba_impl(R_rel, t_rel, pnorm, invd, target, fx, fy, cx, cy,
                           eps_z, with_jac):  # pragma: no cover - compiled
    E, M = invd.shape
    r = np.zeros((E, M, 2))
    valid = np.zeros((E, M), dtype=np.bool_)
    Jpi = np.zeros((E, M, 2, 6))
    Jpj = np.zeros((E, M, 2, 6))
    Jd = np.zeros((E, M, 2))
    for e in range(E):
        R = R_rel[e]
        t = t_rel[e]
        for m in range(M):
            d = 1.0 / invd[e, m]
            x0 = pnorm[m, 0] * d
            y0 = pnorm[m, 1] * d
            z0 = d
            xj = R[0, 0] * x0 + R[0, 1] * y0 + R[0, 2] * z0 + t[0]
            yj = R[1, 0] * x0 + R[1, 1] * y0 + R[1, 2] * z0 + t[1]
            zj = R[2, 0] * x0 + R[2, 1] * y0 + R[2, 2] * z0 + t[2]
            if zj <= eps_z:
                continue
            valid[e, m] = True
            r[e, m, 0] = target[e, m, 0] - (fx * xj / zj + cx)
            r[e, m, 1] = target[e, m, 1] - (fy * yj / zj + cy)
            if not with_jac:
                continue

            # rows of d(pixel)/d(Xj)
            a00 = fx / zj
            a02 = -fx * xj / (zj * zj)
            a11 = fy / zj
            a12 = -fy * yj / (zj * zj)

            # JR = Jproj @ R, rows (2 x 3)
            jr00 = a00 * R[0, 0] + a02 * R[2, 0]
            jr01 = a00 * R[0, 1] + a02 * R[2, 1]
            jr02 = a00 * R[0, 2] + a02 * R[2, 2]
            jr10 = a11 * R[1, 0] + a12 * R[2, 0]
            jr11 = a11 * R[1, 1] + a12 * R[2, 1]
            jr12 = a11 * R[1, 2] + a12 * R[2, 2]

            # source pose translation part
            Jpi[e, m, 0, 0] = jr00
            Jpi[e, m, 0, 1] = jr01
            Jpi[e, m, 0, 2] = jr02
            Jpi[e, m, 1, 0] = jr10
            Jpi[e, m, 1, 1] = jr11
            Jpi[e, m, 1, 2] = jr12
            # source pose rotation part: -JR @ skew(Xi)
            Jpi[e, m, 0, 3] = -(jr01 * z0 - jr02 * y0)
            Jpi[e, m, 0, 4] = -(jr02 * x0 - jr00 * z0)
            Jpi[e, m, 0, 5] = -(jr00 * y0 - jr01 * x0)
            Jpi[e, m, 1, 3] = -(jr11 * z0 - jr12 * y0)
            Jpi[e, m, 1, 4] = -(jr12 * x0 - jr10 * z0)
            Jpi[e, m, 1, 5] = -(jr10 * y0 - jr11 * x0)

            # destination pose translation part: -Jproj
            Jpj[e, m, 0, 0] = -a00
            Jpj[e, m, 0, 2] = -a02
            Jpj[e, m, 1, 1] = -a11
            Jpj[e, m, 1, 2] = -a12
            # destination pose rotation part: Jproj @ skew(Xj)
            Jpj[e, m, 0, 3] = -a02 * yj
            Jpj[e, m, 0, 4] = a02 * xj - a00 * zj
            Jpj[e, m, 0, 5] = a00 * yj
            Jpj[e, m, 1, 3] = a11 * zj - a12 * yj
            Jpj[e, m, 1, 4] = a12 * xj
            Jpj[e, m, 1, 5] = -a11 * xj

            # inverse depth
            dd = -d * d
            Jd[e, m, 0] = jr00 * dd * pnorm[m, 0] + jr01 * dd * pnorm[m, 1] + jr02 * dd
            Jd[e, m, 1] = jr10 * dd * pnorm[m, 0] + jr11 * dd * pnorm[m, 1] + jr12 * dd
    return r, valid, Jpi, Jpj, Jd


def _edge_terms_numba(R_rel, t_rel, pnorm, invd, target, fx, fy, cx, cy, eps_z,
                      with_jac):
    r, valid, Jpi, Jpj, Jd = _edge_terms_numba_impl(
        R_rel, t_rel, pnorm, invd, target,
        float(fx), float(fy), float(cx), float(cy), float(eps_z), with_jac)
    if not with_jac:
        return r, valid, None, None, None
    return r, valid, Jpi, Jpj, Jd


# ------------------------------------------------------------------ dispatch


def edge_terms(R_rel, t_rel, pnorm, invd, target, K, eps_z, with_jac=True):
    """Residuals (and optionally Jacobians) for all edges and grid cells.

    R_rel/t_rel: (E,3,3)/(E,3) relative transforms camera_i -> camera_j.
    pnorm: (M,2) normalized grid coordinates ((u-cx)/fx, (v-cy)/fy).
    invd: (E,M) inverse depth of the source keyframe at each cell.
    target: (E,M,2) pixel targets p + F.
    """
    args = (np.ascontiguousarray(R_rel, dtype=np.float64),
            np.ascontiguousarray(t_rel, dtype=np.float64),
            np.ascontiguousarray(pnorm, dtype=np.float64),
            np.ascontiguousarray(invd, dtype=np.float64),
            np.ascontiguousarray(target, dtype=np.float64),
            K.fx, K.fy, K.cx, K.cy, eps_z, with_jac)
    if active_backend() == "numba":
        return _edge_terms_numba(*args)
    return _edge_terms_numpy(*args)
