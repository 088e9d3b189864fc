"""Fitting losses over body parameters, with verified gradients.

Four squared-error terms (2D reprojected joints, 3D joints, parameter
error over (theta, beta), vertices) combined with non-negative weights,
plus a test-time sequence fitting routine that minimizes them with a
temporal smoothness penalty by gradient descent. Gradients come from
autodiff through the differentiable forward kinematics; tests check them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import numpy as np

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from .body_model import BodyModelDef, BodyParams, forward_xp  # noqa: E402
from .errors import DimensionMismatch, Diverged  # noqa: E402
from .geometry import EPSILON_Z, PinholeIntrinsics  # noqa: E402


@dataclass(frozen=True)
class LossWeights:
    w_2d: float = 1.0
    w_3d: float = 1.0
    w_params: float = 0.1
    w_verts: float = 1.0

    def __post_init__(self):
        for v in (self.w_2d, self.w_3d, self.w_params, self.w_verts):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be non-negative and finite")


def pack_params(params: BodyParams) -> np.ndarray:
    return np.concatenate([params.theta.ravel(), params.beta,
                           params.root_rot, params.root_trans])


def unpack_params(x, model: BodyModelDef) -> BodyParams:
    x = np.asarray(x, dtype=np.float64)
    nt = (model.joint_count - 1) * 3
    nb = model.shape_count
    return BodyParams(x[:nt].reshape(-1, 3), x[nt:nt + nb],
                      x[nt + nb:nt + nb + 3], x[nt + nb + 3:])


def _check_targets(targets, model: BodyModelDef):
    J, V = model.joint_count, model.vertex_count
    shapes = {"joints_2d": (J, 2), "joints_3d": (J, 3), "vertices": (V, 3)}
    for key, want in shapes.items():
        if key in targets and np.shape(targets[key]) != want:
            raise DimensionMismatch(f"{key} has shape {np.shape(targets[key])}, want {want}")
    if "params" in targets and len(pack_params(targets["params"])) != \
            (model.joint_count - 1) * 3 + model.shape_count + 6:
        raise DimensionMismatch("target params do not match the model")


def _terms_xp(x, targets, model, K: PinholeIntrinsics, xp):
    nt = (model.joint_count - 1) * 3
    nb = model.shape_count
    theta = x[:nt].reshape(-1, 3)
    beta = x[nt:nt + nb]
    joints, verts = forward_xp(model, theta, beta,
                               x[nt + nb:nt + nb + 3], x[nt + nb + 3:], xp=xp)
    zero = xp.asarray(0.0)
    l2d = l3d = lp = lv = zero
    if "joints_2d" in targets:
        z = xp.clip(joints[:, 2], EPSILON_Z, None)
        proj = xp.stack([K.fx * joints[:, 0] / z + K.cx,
                         K.fy * joints[:, 1] / z + K.cy], axis=-1)
        l2d = xp.sum((xp.asarray(targets["joints_2d"]) - proj) ** 2)
    if "joints_3d" in targets:
        l3d = xp.sum((xp.asarray(targets["joints_3d"]) - joints) ** 2)
    if "params" in targets:
        gt = targets["params"]
        lp = xp.sum((theta - xp.asarray(gt.theta)) ** 2) + \
            xp.sum((beta - xp.asarray(gt.beta)) ** 2)
    if "vertices" in targets:
        lv = xp.sum((xp.asarray(targets["vertices"]) - verts) ** 2)
    return l2d, l3d, lp, lv


def loss_terms(params: BodyParams, targets: dict, model: BodyModelDef,
               K: PinholeIntrinsics, weights: LossWeights = LossWeights()):
    """Individual loss terms and their weighted total.

    targets may hold any subset of joints_2d (px), joints_3d (m),
    params (BodyParams), vertices (m); missing targets contribute zero.
    Returns (l_2d, l_3d, l_params, l_verts, total).
    """
    _check_targets(targets, model)
    l2d, l3d, lp, lv = _terms_xp(pack_params(params), targets, model, K, np)
    total = weights.w_2d * l2d + weights.w_3d * l3d + \
        weights.w_params * lp + weights.w_verts * lv
    return float(l2d), float(l3d), float(lp), float(lv), float(total)


def _total_jax(x, targets, model, K, weights: LossWeights):
    l2d, l3d, lp, lv = _terms_xp(x, targets, model, K, jnp)
    return weights.w_2d * l2d + weights.w_3d * l3d + \
        weights.w_params * lp + weights.w_verts * lv


_JIT_CACHE: dict = {}


def _normalize_targets(targets):
    """Split targets into a static key tuple and an array tuple for jit."""
    keys = tuple(sorted(targets))
    vals = []
    for k in keys:
        if k == "params":
            p = targets[k]
            vals.extend([np.asarray(p.theta), np.asarray(p.beta)])
        else:
            vals.append(np.asarray(targets[k], dtype=np.float64))
    return keys, tuple(vals)


def _value_and_grad_fn(model, K, weights, keys):
    """Compiled total-and-gradient, cached per (model, K, weights, targets)."""
    cache_key = (id(model), K, weights, keys)
    fn = _JIT_CACHE.get(cache_key)
    if fn is not None:
        return fn

    class _GtParams:
        def __init__(self, theta, beta):
            self.theta = theta
            self.beta = beta

    def total(x, *vals):
        targets = {}
        n = 0
        for k in keys:
            if k == "params":
                targets[k] = _GtParams(vals[n], vals[n + 1])
                n += 2
            else:
                targets[k] = vals[n]
                n += 1
        return _total_jax(x, targets, model, K, weights)

    fn = jax.jit(jax.value_and_grad(total))
    _JIT_CACHE[cache_key] = fn
    return fn


def grad_total(params: BodyParams, targets: dict, model: BodyModelDef,
               K: PinholeIntrinsics, weights: LossWeights = LossWeights()):
    """Gradient of the weighted total w.r.t. the packed parameter vector.

    Use unpack_params to view the result per field.
    """
    _check_targets(targets, model)
    keys, vals = _normalize_targets(targets)
    fn = _value_and_grad_fn(model, K, weights, keys)
    _, g = fn(jnp.asarray(pack_params(params)), *vals)
    return np.asarray(g)


def fit_sequence(init: list[BodyParams], targets: list[dict], model: BodyModelDef,
                 K: PinholeIntrinsics, weights: LossWeights = LossWeights(),
                 smooth_w: float = 0.0, max_iters: int = 200, step0: float = 1e-3,
                 tol: float = 1e-10):
    """Gradient descent with backtracking over a sequence of frames.

    Minimizes the summed per-frame total plus smooth_w * sum of squared
    inter-frame parameter differences. The accepted energy is monotone
    non-increasing.
    """
    if not init:
        raise ValueError("need at least one frame")
    if len(targets) != len(init):
        raise DimensionMismatch("targets and init lengths differ")
    X = np.stack([pack_params(p) for p in init])  # (N, P)
    N = len(init)
    norm = [_normalize_targets(t) for t in targets]
    fns = [_value_and_grad_fn(model, K, weights, keys) for keys, _ in norm]

    def energy_and_gradient(Xc):
        tot = 0.0
        G = np.empty_like(Xc)
        for t in range(N):
            v, g = fns[t](jnp.asarray(Xc[t]), *norm[t][1])
            tot += float(v)
            G[t] = np.asarray(g)
        if smooth_w > 0 and N > 1:
            diff = Xc[1:] - Xc[:-1]
            tot += smooth_w * float(np.sum(diff * diff))
            G[1:] += 2.0 * smooth_w * diff
            G[:-1] -= 2.0 * smooth_w * diff
        return tot, G

    def energy(Xc):
        return energy_and_gradient(Xc)[0]

    def gradient(Xc):
        return energy_and_gradient(Xc)[1]

    E = energy(X)
    if not np.isfinite(E):
        raise Diverged("non-finite initial energy")
    step = step0
    for _ in range(max_iters):
        G = gradient(X)
        gnorm = float(np.linalg.norm(G))
        if gnorm < tol:
            break
        accepted = False
        for _ in range(30):
            Xn = X - step * G
            En = energy(Xn)
            if np.isfinite(En) and En <= E:
                X, E = Xn, En
                step *= 1.5
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # no descent possible at float precision: converged
        if not np.isfinite(E):
            raise Diverged("energy became non-finite")
    return [unpack_params(x, model) for x in X]
