import numpy as np
import pytest

from trajengine.body_model import (BodyModelDef, BodyParams, default_model,
                                   forward, forward_xp, load_body_model,
                                   make_synthetic_model, render_depth,
                                   save_body_model)
from trajengine.errors import DimensionMismatch, NoVisibleVertices
from trajengine.geometry import PinholeIntrinsics, so3_exp, so3_log

K = PinholeIntrinsics(120.0, 120.0, 64.0, 48.0, 128, 96)


def random_params(model, rng, pose_scale=0.4):
    theta = rng.normal(0, pose_scale, (model.joint_count - 1, 3))
    beta = rng.normal(0, 1.0, model.shape_count)
    return BodyParams(theta, beta, rng.normal(0, 0.5, 3), rng.normal(0, 1.0, 3))


def test_rest_pose_reproduces_template():
    model = make_synthetic_model()
    joints, verts = forward(model, BodyParams.zeros(model))
    assert np.allclose(joints, model.rest_joints, atol=1e-12)
    assert np.allclose(verts, model.rest_vertices, atol=1e-12)


def test_rigid_equivariance():
    model = make_synthetic_model()
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = random_params(model, rng)
        base = BodyParams(p.theta, p.beta, np.zeros(3), np.zeros(3))
        j0, v0 = forward(model, base)
        j1, v1 = forward(model, p)
        R = so3_exp(p.root_rot)
        assert np.allclose(j1, j0 @ R.T + p.root_trans, atol=1e-9)
        assert np.allclose(v1, v0 @ R.T + p.root_trans, atol=1e-9)


def test_shape_linearity():
    model = make_synthetic_model()
    rng = np.random.default_rng(1)
    for _ in range(20):
        b1 = rng.normal(0, 1, model.shape_count)
        b2 = rng.normal(0, 1, model.shape_count)
        a = rng.uniform(-2, 2)

        def verts_at(beta):
            _, v = forward(model, BodyParams(
                np.zeros((model.joint_count - 1, 3)), beta,
                np.zeros(3), np.zeros(3)))
            return v

        lhs = verts_at(a * b1 + (1 - a) * b2)
        rhs = a * verts_at(b1) + (1 - a) * verts_at(b2)
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_forward_xp_generic_matches_numpy():
    model = make_synthetic_model()
    rng = np.random.default_rng(2)
    p = random_params(model, rng)
    j1, v1 = forward(model, p)
    j2, v2 = forward_xp(model, p.theta, p.beta, p.root_rot, p.root_trans, xp=np)
    assert np.allclose(j1, j2, atol=1e-12)
    assert np.allclose(v1, v2, atol=1e-12)


def test_dimension_checks():
    model = make_synthetic_model()
    with pytest.raises(DimensionMismatch):
        forward(model, BodyParams(np.zeros((2, 3)), np.zeros(model.shape_count),
                                  np.zeros(3), np.zeros(3)))
    with pytest.raises(DimensionMismatch):
        forward(model, BodyParams(np.zeros((model.joint_count - 1, 3)),
                                  np.zeros(7), np.zeros(3), np.zeros(3)))


def test_model_validation():
    model = make_synthetic_model()
    bad = model.skin_weights.copy()
    bad[0] *= 2.0
    with pytest.raises(ValueError):
        BodyModelDef(model.parent, model.rest_joints, model.rest_vertices,
                     bad, model.shape_dirs, model.joint_regressor)
    cyc = model.parent.copy()
    cyc[1] = 2
    cyc[2] = 1
    with pytest.raises(ValueError):
        BodyModelDef(cyc, model.rest_joints, model.rest_vertices,
                     model.skin_weights, model.shape_dirs, model.joint_regressor)


def test_render_depth():
    model = make_synthetic_model()
    params = BodyParams(np.zeros((model.joint_count - 1, 3)),
                        np.zeros(model.shape_count), np.zeros(3),
                        np.array([0.0, -0.6, 3.0]))
    depth, mask = render_depth(model, params, K)
    assert mask.any()
    assert np.all(depth[mask] > 0)
    # nearest vertex wins the z-buffer
    assert depth[mask].min() >= 2.0

    behind = BodyParams(params.theta, params.beta, np.zeros(3),
                        np.array([0.0, 0.0, -5.0]))
    with pytest.raises(NoVisibleVertices):
        render_depth(model, behind, K)


def test_save_load_round_trip(tmp_path):
    model = make_synthetic_model()
    path = tmp_path / "model.npz"
    save_body_model(model, path)
    loaded = load_body_model(path)
    assert np.array_equal(loaded.parent, model.parent)
    assert np.allclose(loaded.rest_vertices, model.rest_vertices)
    assert np.allclose(loaded.joint_regressor, model.joint_regressor)


def test_default_model_loads():
    model = default_model()
    joints, verts = forward(model, BodyParams.zeros(model))
    assert joints.shape == (model.joint_count, 3)
    assert verts.shape == (model.vertex_count, 3)


def test_axis_angle_wraps():
    p = BodyParams(np.zeros((5, 3)), np.zeros(2),
                   np.array([0.0, 0.0, 3 * np.pi]), np.zeros(3))
    assert np.linalg.norm(p.root_rot) < 2 * np.pi
    assert np.allclose(so3_exp(p.root_rot),
                       so3_exp(np.array([0.0, 0.0, 3 * np.pi])), atol=1e-9)
