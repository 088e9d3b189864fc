import numpy as np
import pytest

from trajengine.body_model import BodyParams, forward, make_synthetic_model
from trajengine.errors import DimensionMismatch
from trajengine.geometry import PinholeIntrinsics, project
from trajengine.losses import (LossWeights, fit_sequence, grad_total,
                               loss_terms, pack_params, unpack_params)

K = PinholeIntrinsics(120.0, 120.0, 64.0, 48.0, 128, 96)
MODEL = make_synthetic_model()


def random_params(rng, pose_scale=0.3):
    return BodyParams(rng.normal(0, pose_scale, (MODEL.joint_count - 1, 3)),
                      rng.normal(0, 0.5, MODEL.shape_count),
                      rng.normal(0, 0.3, 3),
                      rng.normal(0, 0.3, 3) + np.array([0.0, 0.0, 4.0]))


def targets_from(params):
    joints, verts = forward(MODEL, params)
    return {"joints_2d": project(K, joints), "joints_3d": joints,
            "params": params, "vertices": verts}


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    q = unpack_params(pack_params(p), MODEL)
    assert np.allclose(q.theta, p.theta)
    assert np.allclose(q.beta, p.beta)
    assert np.allclose(q.root_rot, p.root_rot)
    assert np.allclose(q.root_trans, p.root_trans)


def test_zero_at_ground_truth():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    terms = loss_terms(p, targets_from(p), MODEL, K)
    assert all(t < 1e-16 for t in terms)


def test_each_term_counts():
    rng = np.random.default_rng(2)
    gt = random_params(rng)
    other = random_params(rng)
    t = targets_from(gt)
    l2d, l3d, lp, lv, total = loss_terms(other, t, MODEL, K)
    assert min(l2d, l3d, lp, lv) > 0
    w = LossWeights(w_2d=2.0, w_3d=3.0, w_params=0.5, w_verts=1.5)
    _, _, _, _, tw = loss_terms(other, t, MODEL, K, w)
    assert tw == pytest.approx(2 * l2d + 3 * l3d + 0.5 * lp + 1.5 * lv, rel=1e-12)


def test_target_shape_checks():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    with pytest.raises(DimensionMismatch):
        loss_terms(p, {"joints_3d": np.zeros((2, 3))}, MODEL, K)


def test_gradient_matches_finite_differences():
    # central differences on the packed vector; eps chosen for the
    # magnitude of these quadratic terms
    rng = np.random.default_rng(4)
    eps = 1e-5
    failures = 0
    for trial in range(100):
        gt = random_params(rng)
        p = random_params(rng)
        t = targets_from(gt)
        if trial % 3 == 0:
            t = {"joints_3d": t["joints_3d"], "params": t["params"]}
        g = grad_total(p, t, MODEL, K)
        x = pack_params(p)
        idx = rng.integers(0, len(x), size=6)
        for k in idx:
            xp_ = x.copy()
            xp_[k] += eps
            xm = x.copy()
            xm[k] -= eps
            _, _, _, _, fp = loss_terms(unpack_params(xp_, MODEL), t, MODEL, K)
            _, _, _, _, fm = loss_terms(unpack_params(xm, MODEL), t, MODEL, K)
            fd = (fp - fm) / (2 * eps)
            denom = max(abs(fd), abs(g[k]), 1e-6 * np.abs(g).max(), 1e-12)
            if abs(fd - g[k]) / denom > 1e-4:
                failures += 1
    assert failures == 0


def test_fit_sequence_reduces_error():
    rng = np.random.default_rng(5)
    gt = [random_params(rng) for _ in range(3)]
    targets = [targets_from(p) for p in gt]
    init = [BodyParams(p.theta + rng.normal(0, 0.05, p.theta.shape),
                       p.beta + rng.normal(0, 0.05, p.beta.shape),
                       p.root_rot + rng.normal(0, 0.02, 3),
                       p.root_trans + rng.normal(0, 0.05, 3)) for p in gt]

    def joint_error(params):
        return np.mean([np.linalg.norm(forward(MODEL, a)[0] - t["joints_3d"])
                        for a, t in zip(params, targets)])

    fitted = fit_sequence(init, targets, MODEL, K, smooth_w=1e-4, max_iters=80)
    assert joint_error(fitted) < 0.5 * joint_error(init)


def test_fit_sequence_smoothness_pulls_frames_together():
    rng = np.random.default_rng(6)
    gt = random_params(rng)
    t = targets_from(gt)
    init = [random_params(rng) for _ in range(3)]
    loose = fit_sequence(init, [t] * 3, MODEL, K, smooth_w=0.0, max_iters=30)
    tight = fit_sequence(init, [t] * 3, MODEL, K, smooth_w=10.0, max_iters=30)

    def spread(params):
        X = np.stack([pack_params(p) for p in params])
        return float(np.sum((X[1:] - X[:-1]) ** 2))

    assert spread(tight) <= spread(loose) + 1e-12


def test_fit_sequence_length_mismatch():
    rng = np.random.default_rng(7)
    p = random_params(rng)
    with pytest.raises(DimensionMismatch):
        fit_sequence([p], [targets_from(p)] * 2, MODEL, K)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_2d=-1.0)
