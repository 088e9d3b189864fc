import numpy as np
import pytest

from trajengine.body_model import BodyParams, make_synthetic_model, render_depth
from trajengine.errors import (InsufficientOverlap, NoValidFrames,
                               TooFewValidCells)
from trajengine.geometry import PinholeIntrinsics
from trajengine.metric_scale import (MetricDepthFrame, ScaleOptions,
                                     apply_far_threshold,
                                     correct_depth_with_body,
                                     estimate_frame_scale,
                                     estimate_sequence_scale, rescale,
                                     robust_loss, robust_loss_grad)
from trajengine.scene_sim import NoiseSpec, PathSpec, SceneSpec, generate


def grid_search_alpha(d, D, c, lo, hi, n=20001):
    """Brute-force 1-D oracle for the robust per-frame scale."""
    alphas = np.linspace(lo, hi, n)
    costs = [np.sum(robust_loss(a * d - D, c)) for a in alphas]
    return alphas[int(np.argmin(costs))]


def make_frame(rng, cells=256, alpha=2.0, noise=0.05, outlier_frac=0.0):
    d = rng.uniform(1.0, 6.0, cells)
    D = alpha * d + rng.normal(0, noise, cells)
    n_out = int(outlier_frac * cells)
    if n_out:
        idx = rng.choice(cells, n_out, replace=False)
        D[idx] *= 10.0
    shape = (16, cells // 16)
    return d.reshape(shape), MetricDepthFrame(D.reshape(shape),
                                              np.ones(shape, dtype=bool))


def test_robust_loss_properties():
    x = np.linspace(-10, 10, 1001)
    rho = robust_loss(x, 0.5)
    assert np.all(rho >= 0) and np.all(rho < 1)
    assert robust_loss(0.0, 0.5) == 0.0
    assert robust_loss(0.5, 0.5) == pytest.approx(0.5)
    assert np.allclose(rho, robust_loss(-x, 0.5))
    eps = 1e-7
    fd = (robust_loss(x + eps, 0.5) - robust_loss(x - eps, 0.5)) / (2 * eps)
    assert np.allclose(robust_loss_grad(x, 0.5), fd, atol=1e-6)


def test_frame_scale_matches_grid_search_oracle():
    rng = np.random.default_rng(0)
    opts = ScaleOptions(min_valid=32)
    for trial in range(50):
        alpha = rng.uniform(0.5, 3.0)
        d, D = make_frame(rng, alpha=alpha, noise=0.05,
                          outlier_frac=rng.uniform(0, 0.2))
        got = estimate_frame_scale(d, D, opts)
        oracle = grid_search_alpha(d.ravel(), D.depth.ravel(), opts.c,
                                   0.25 * alpha, 4.0 * alpha)
        assert got == pytest.approx(oracle, rel=1e-3)


def test_scale_equivariance():
    rng = np.random.default_rng(1)
    opts = ScaleOptions(min_valid=32)
    d, D = make_frame(rng)
    base = estimate_frame_scale(d, D, opts)
    for k in (0.5, 2.0, 10.0):
        got = estimate_frame_scale(k * d, D, opts)
        assert got == pytest.approx(base / k, rel=1e-6)


def test_outlier_insensitivity():
    rng = np.random.default_rng(2)
    opts = ScaleOptions(min_valid=32)
    d, D_clean = make_frame(rng, alpha=2.0, noise=0.02)
    clean = estimate_frame_scale(d, D_clean, opts)
    for frac in (0.1, 0.2, 0.3):
        D = D_clean.copy()
        flat = D.depth.ravel()
        idx = rng.choice(flat.size, int(frac * flat.size), replace=False)
        flat[idx] *= 10.0
        got = estimate_frame_scale(d, D, opts)
        assert abs(got - clean) / clean < 0.05


def test_median_ignores_minority_corruption():
    rng = np.random.default_rng(3)
    spec = SceneSpec(seed=3, frame_count=9, true_scale=2.0,
                     camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8))
    bun = generate(spec, NoiseSpec())
    depths = [D.copy() for D in bun.metric_depths]
    for f in rng.choice(9, 4, replace=False):  # strict minority
        depths[f].depth *= rng.uniform(3.0, 50.0)
    est = estimate_sequence_scale(bun.graph, depths)
    assert est.alpha == pytest.approx(2.0, rel=1e-6)


def test_far_threshold():
    D = MetricDepthFrame(np.array([[0.2, 1.0], [5.0, 20.0]]),
                         np.ones((2, 2), dtype=bool))
    out = apply_far_threshold(D, 0.5, 12.0)
    assert out.valid.tolist() == [[False, True], [True, False]]
    with pytest.raises(ValueError):
        apply_far_threshold(D, 5.0, 1.0)


def test_too_few_cells_and_no_valid_frames():
    rng = np.random.default_rng(4)
    d, D = make_frame(rng, cells=32)
    with pytest.raises(TooFewValidCells):
        estimate_frame_scale(d, D, ScaleOptions(min_valid=64))
    spec = SceneSpec(seed=5, frame_count=3,
                     camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8))
    bun = generate(spec, NoiseSpec())
    empty = [MetricDepthFrame(D.depth, np.zeros_like(D.valid))
             for D in bun.metric_depths]
    with pytest.raises(NoValidFrames):
        estimate_sequence_scale(bun.graph, empty)


def test_masked_cells_do_not_affect_scale():
    spec = SceneSpec(seed=6, frame_count=6, dynamic_frac=0.25, true_scale=1.5,
                     camera=PathSpec(kind="circle", radius=4.0, speed=1.0))
    bun = generate(spec, NoiseSpec())
    est = estimate_sequence_scale(bun.graph, bun.metric_depths)
    # corrupt the masked region arbitrarily; the estimate must not move
    depths = [D.copy() for D in bun.metric_depths]
    for kf, D in zip(bun.graph.keyframes, depths):
        D.depth[kf.mask] = 999.0
        D.valid[kf.mask] = True
    est2 = estimate_sequence_scale(bun.graph, depths)
    assert est2.alpha == pytest.approx(est.alpha, rel=1e-12)


def test_rescale():
    spec = SceneSpec(seed=7, frame_count=4,
                     camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8))
    bun = generate(spec, NoiseSpec())
    out = rescale(bun.graph, 2.5)
    for a, b in zip(out.poses, bun.graph.poses):
        assert np.allclose(a.trans, 2.5 * b.trans)
        assert np.allclose(a.quat, b.quat)
    for ka, kb in zip(out.keyframes, bun.graph.keyframes):
        assert np.allclose(ka.depth, 2.5 * kb.depth)
    with pytest.raises(ValueError):
        rescale(bun.graph, -1.0)


K_RENDER = PinholeIntrinsics(120.0, 120.0, 64.0, 48.0, 128, 96)


def rendered_body():
    model = make_synthetic_model()
    params = BodyParams(np.zeros((model.joint_count - 1, 3)),
                        np.zeros(model.shape_count), np.zeros(3),
                        np.array([0.0, -0.6, 3.0]))
    return render_depth(model, params, K_RENDER)


def pool_min(depth, mask, rows=12, cols=16):
    sr, sc = depth.shape[0] // rows, depth.shape[1] // cols
    cell = np.zeros((rows, cols))
    cm = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for q in range(cols):
            pm = mask[r * sr:(r + 1) * sr, q * sc:(q + 1) * sc]
            if pm.any():
                cell[r, q] = depth[r * sr:(r + 1) * sr, q * sc:(q + 1) * sc][pm].min()
                cm[r, q] = True
    return cell, cm


def test_depth_correction_shift():
    depth, mask = rendered_body()
    cell, cm = pool_min(depth, mask)
    D = MetricDepthFrame(np.where(cm, cell - 0.5, 4.0), np.ones_like(cm, dtype=bool))
    corrected, (s, t) = correct_depth_with_body(D, depth, mask, mode="shift")
    assert s == 1.0
    assert t == pytest.approx(0.5, abs=1e-6)
    assert np.allclose(corrected.depth, D.depth + t)


def test_depth_correction_shift_scale_matches_grid_oracle():
    depth, mask = rendered_body()
    cell, cm = pool_min(depth, mask)
    D = MetricDepthFrame(np.where(cm, (cell - 0.3) / 1.2, 4.0),
                         np.ones_like(cm, dtype=bool))
    corrected, (s, t) = correct_depth_with_body(D, depth, mask, mode="shift_scale")

    Dv, Rv = D.depth[cm], cell[cm]
    best = (np.inf, None, None)
    for si in np.linspace(0.5, 2.0, 151):
        for ti in np.linspace(-1.0, 1.0, 201):
            cost = float(np.sum(robust_loss(si * Dv + ti - Rv, 0.5)))
            if cost < best[0]:
                best = (cost, si, ti)
    assert s == pytest.approx(best[1], abs=0.02)
    assert t == pytest.approx(best[2], abs=0.02)
    assert s == pytest.approx(1.2, rel=1e-3)
    assert t == pytest.approx(0.3, abs=1e-3)


def test_pseudo_rgbd_consistent_depth_matches_full_solve():
    from trajengine.dba import SolverOptions, solve
    from trajengine.metric_scale import pseudo_rgbd_baseline
    from trajengine.metrics import ate
    from trajengine.scene_sim import perturb_poses
    from trajengine.world_composer import Trajectory

    spec = SceneSpec(seed=8, frame_count=5,
                     camera=PathSpec(kind="line", start=(0, 0, 1.5), speed=0.8))
    bun = generate(spec, NoiseSpec())  # noise-free: metric depth = true depth
    g = perturb_poses(bun.graph, 0.01, 0.02, seed=9)
    full, _ = solve(g.copy(), SolverOptions())
    pseudo, _ = pseudo_rgbd_baseline(g, bun.metric_depths)

    def traj(gr):
        return Trajectory(np.arange(len(gr.poses)), np.array(gr.timestamps),
                          gr.poses)

    assert ate(traj(pseudo), traj(full)) < 1e-6


def test_depth_correction_insufficient_overlap():
    depth, mask = rendered_body()
    D = MetricDepthFrame(np.full((12, 16), 4.0), np.zeros((12, 16), dtype=bool))
    with pytest.raises(InsufficientOverlap):
        correct_depth_with_body(D, depth, mask)
