"""Robust metric-scale recovery for the monocular reconstruction.

Aligns solver depth to noisy metric depth with a bounded robust loss,
solved per keyframe by quasi-Newton descent and aggregated with the
median. Far regions and human-masked cells are excluded. Also provides
the shift/scale depth correction from rendered body depth and the
pseudo-RGB-D falsification baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .dba import FrameGraph, SolverOptions, solve
from .errors import (InsufficientOverlap, NonFiniteObjective, NoValidFrames,
                     TooFewValidCells)


@dataclass
class MetricDepthFrame:
    depth: np.ndarray  # (rows, cols) meters
    valid: np.ndarray  # (rows, cols) bool

    def copy(self) -> "MetricDepthFrame":
        return MetricDepthFrame(self.depth.copy(), self.valid.copy())


@dataclass
class ScaleEstimate:
    alpha: float  # meters per solver unit, median of per-keyframe estimates
    per_keyframe: list  # (keyframe id, alpha_k, inlier_fraction)


@dataclass
class ScaleOptions:
    c: float = 0.5  # robust loss half-saturation point, meters
    near: float = 0.5
    far: float = 12.0
    min_valid: int = 64


def robust_loss(x, c: float):
    """Bounded even penalty x^2 / (x^2 + c^2); 0 at 0, 1/2 at |x| = c."""
    if c <= 0:
        raise ValueError("c must be positive")
    x = np.asarray(x, dtype=np.float64)
    return x * x / (x * x + c * c)


def robust_loss_grad(x, c: float):
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * x * c * c / (x * x + c * c) ** 2


def apply_far_threshold(D: MetricDepthFrame, near: float, far: float) -> MetricDepthFrame:
    """Keep only the middle depth region where prediction is trusted."""
    if not (0 < near < far):
        raise ValueError("need 0 < near < far")
    out = D.copy()
    out.valid &= (out.depth >= near) & (out.depth <= far)
    return out


def _frame_objective(alpha, d, D, c):
    return float(np.sum(robust_loss(alpha * d - D, c)))


def estimate_frame_scale(depth, D: MetricDepthFrame, opts: ScaleOptions = ScaleOptions(),
                         extra_invalid=None) -> float:
    """Scale aligning one keyframe's solver depth to metric depth.

    Minimizes sum of robust residuals over valid cells by BFGS (in log
    scale, keeping alpha positive) from the median-ratio initialization.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = D.valid & (depth > 0)
    if extra_invalid is not None:
        valid &= ~extra_invalid
    d = depth[valid]
    Dm = D.depth[valid]
    if d.size < opts.min_valid:
        raise TooFewValidCells(f"{d.size} valid cells < min_valid={opts.min_valid}")
    a0 = float(np.median(Dm) / np.median(d))
    if not (np.isfinite(a0) and a0 > 0):
        raise NonFiniteObjective("degenerate median initialization")

    def f(s):
        return _frame_objective(np.exp(s[0]), d, Dm, opts.c)

    def fg(s):
        a = np.exp(s[0])
        r = a * d - Dm
        return np.array([np.sum(robust_loss_grad(r, opts.c) * d) * a])

    best = None
    for start in (a0, 0.5 * a0, 2.0 * a0):
        res = minimize(f, x0=[np.log(start)], jac=fg, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 200})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise NonFiniteObjective("robust scale objective is non-finite")
    return float(np.exp(best.x[0]))


def inlier_fraction(alpha, depth, D: MetricDepthFrame, opts: ScaleOptions):
    valid = D.valid & (depth > 0)
    if not np.any(valid):
        return 0.0
    r = alpha * depth[valid] - D.depth[valid]
    return float(np.mean(np.abs(r) < opts.c))


def estimate_sequence_scale(graph: FrameGraph, depths, opts: ScaleOptions = ScaleOptions()
                            ) -> ScaleEstimate:
    """Per-keyframe robust scale, aggregated with the median.

    depths: list of MetricDepthFrame aligned with graph.keyframes. Human
    (dynamic) cells and out-of-band depths never enter the objective;
    keyframes with too few usable cells are skipped.
    """
    per = []
    for kf, D in zip(graph.keyframes, depths):
        Dt = apply_far_threshold(D, opts.near, opts.far)
        try:
            a_k = estimate_frame_scale(kf.depth, Dt, opts, extra_invalid=kf.mask)
        except TooFewValidCells:
            continue
        per.append((kf.id, a_k, inlier_fraction(a_k, kf.depth, Dt, opts)))
    if not per:
        raise NoValidFrames("no keyframe produced a scale estimate")
    alpha = float(np.median([a for _, a, _ in per]))
    return ScaleEstimate(alpha, per)


def rescale(graph: FrameGraph, alpha: float) -> FrameGraph:
    """Scale all pose translations and depths by alpha; rotations untouched."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    out = graph.copy()
    out.poses = [replace(p, trans=p.trans * alpha) for p in out.poses]
    for kf in out.keyframes:
        kf.depth = kf.depth * alpha
    return out


def correct_depth_with_body(D: MetricDepthFrame, rendered_depth, rendered_mask,
                            mode: str = "shift", c: float = 0.5,
                            min_overlap: int = 8):
    """Shift (or shift+scale) correction of metric depth from rendered body depth.

    rendered_depth/rendered_mask are full-resolution (height, width) from
    render_depth; they are pooled to the solver grid by per-cell minimum.
    Returns (corrected MetricDepthFrame, (s, t)) with corrected = s*D + t
    applied to all cells.
    """
    if mode not in ("shift", "shift_scale"):
        raise ValueError(f"unknown mode {mode!r}")
    rows, cols = D.depth.shape
    H, W = rendered_depth.shape
    sr, sc = H // rows, W // cols
    cell_depth = np.zeros((rows, cols))
    cell_mask = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for q in range(cols):
            patch_m = rendered_mask[r * sr:(r + 1) * sr, q * sc:(q + 1) * sc]
            if np.any(patch_m):
                patch_d = rendered_depth[r * sr:(r + 1) * sr, q * sc:(q + 1) * sc]
                cell_depth[r, q] = np.min(patch_d[patch_m])
                cell_mask[r, q] = True
    region = cell_mask & D.valid
    if int(region.sum()) < min_overlap:
        raise InsufficientOverlap(
            f"{int(region.sum())} overlapping cells < {min_overlap}")
    Dv = D.depth[region]
    Rv = cell_depth[region]

    if mode == "shift":
        def f(x):
            return float(np.sum(robust_loss(Dv + x[0] - Rv, c)))

        def fg(x):
            return np.array([np.sum(robust_loss_grad(Dv + x[0] - Rv, c))])

        res = minimize(f, x0=[float(np.median(Rv - Dv))], jac=fg, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 200})
        s, t = 1.0, float(res.x[0])
    else:
        def f(x):
            return float(np.sum(robust_loss(x[0] * Dv + x[1] - Rv, c)))

        def fg(x):
            g = robust_loss_grad(x[0] * Dv + x[1] - Rv, c)
            return np.array([np.sum(g * Dv), np.sum(g)])

        s0 = float(np.median(Rv) / max(np.median(Dv), 1e-9))
        res = minimize(f, x0=[s0, 0.0], jac=fg, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 400})
        s, t = float(res.x[0]), float(res.x[1])
    if not np.isfinite([s, t]).all():
        raise NonFiniteObjective("depth correction diverged")
    out = D.copy()
    out.depth = s * out.depth + t
    return out, (s, t)


def pseudo_rgbd_baseline(graph: FrameGraph, depths,
                         solver_opts: SolverOptions | None = None):
    """Fix keyframe depths to the metric prediction and solve poses only.

    The falsification baseline: inconsistent per-frame depth bias is
    baked into the geometry instead of being absorbed robustly.
    """
    g = graph.copy()
    for kf, D in zip(g.keyframes, depths):
        d = kf.depth.copy()
        ok = D.valid & (D.depth > 0)
        d[ok] = D.depth[ok]
        kf.depth = d
    opts = solver_opts or SolverOptions()
    opts = replace(opts, optimize_depths=False)
    return solve(g, opts)
