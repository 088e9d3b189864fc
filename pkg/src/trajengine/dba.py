"""Masked dense bundle adjustment.

Joint Gauss-Newton optimization of keyframe poses and per-cell depths that
minimizes confidence-weighted flow reprojection error over a keyframe graph,
with dynamic-region masking applied to the confidence weights. Depths are
parameterized as inverse depth and eliminated per cell with a Schur
complement; poses use a right-multiplicative se3 retraction with
Levenberg-style diagonal damping.

Pose convention: graph poses are world-from-camera (the pose of the camera
in the world), anchored with pose 0 = identity. The relative transform
taking camera-i points to camera-j points is therefore G_j^-1 o G_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import Diverged, InsufficientConstraints
from .geometry import EPSILON_Z, PinholeIntrinsics, SE3Pose, compose, se3_exp


@dataclass
class Keyframe:
    """One solver node: a stride-s grid of depths plus a dynamic mask."""

    id: int
    depth: np.ndarray  # (rows, cols) positive, solver units
    mask: np.ndarray  # (rows, cols) bool, True = dynamic

    def copy(self) -> "Keyframe":
        return Keyframe(self.id, self.depth.copy(), self.mask.copy())


@dataclass
class FlowEdge:
    i: int
    j: int
    flow: np.ndarray  # (rows, cols, 2) pixels
    conf: np.ndarray  # (rows, cols, 2) in [0, 1]

    def copy(self) -> "FlowEdge":
        return FlowEdge(self.i, self.j, self.flow.copy(), self.conf.copy())


@dataclass
class FrameGraph:
    intrinsics: PinholeIntrinsics
    stride: int
    keyframes: list[Keyframe]
    edges: list[FlowEdge]
    poses: list[SE3Pose]  # world-from-camera, index-aligned with keyframes
    timestamps: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.timestamps:
            self.timestamps = [float(k) for k in range(len(self.keyframes))]
        ids = {kf.id for kf in self.keyframes}
        for e in self.edges:
            if e.i == e.j or e.i not in ids or e.j not in ids:
                raise ValueError(f"edge ({e.i},{e.j}) references invalid keyframes")

    @property
    def grid_shape(self) -> tuple[int, int]:
        s = self.stride
        return self.intrinsics.height // s, self.intrinsics.width // s

    def copy(self) -> "FrameGraph":
        return FrameGraph(self.intrinsics, self.stride,
                          [k.copy() for k in self.keyframes],
                          [e.copy() for e in self.edges],
                          list(self.poses), list(self.timestamps))

    def index_of(self, kf_id: int) -> int:
        for idx, kf in enumerate(self.keyframes):
            if kf.id == kf_id:
                return idx
        raise KeyError(kf_id)


def grid_pixels(K: PinholeIntrinsics, stride: int) -> np.ndarray:
    """Cell-center pixel coordinates of the solver lattice, (M, 2)."""
    rows, cols = K.height // stride, K.width // stride
    v = stride * np.arange(rows) + stride / 2.0
    u = stride * np.arange(cols) + stride / 2.0
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


@dataclass
class SolverOptions:
    max_iters: int = 50
    rel_tol: float = 1e-6
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 5.0
    patience: int = 3
    optimize_depths: bool = True
    min_depth: float = 1e-4
    max_depth: float = 1e6


@dataclass
class SolveStats:
    iterations: int
    initial_energy: float
    final_energy: float
    converged: bool
    lambda_final: float


def apply_dual_mask(graph: FrameGraph) -> FrameGraph:
    """Zero edge confidence wherever the source keyframe cell is dynamic.

    Removing the weight removes the cell from the reprojection objective;
    image-domain masking is emulated upstream by the simulator's flow modes.
    """
    out = graph.copy()
    by_id = {kf.id: kf for kf in out.keyframes}
    for e in out.edges:
        src_mask = by_id[e.i].mask
        e.conf[src_mask] = 0.0
    return out


def _pack(graph: FrameGraph):
    """Flatten the graph into kernel-ready arrays."""
    K = graph.intrinsics
    rows, cols = graph.grid_shape
    M = rows * cols
    pix = grid_pixels(K, graph.stride)
    pnorm = np.stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy], axis=-1)
    idx = {kf.id: n for n, kf in enumerate(graph.keyframes)}
    invd = np.stack([1.0 / kf.depth.reshape(M) for kf in graph.keyframes])
    E = len(graph.edges)
    src = np.array([idx[e.i] for e in graph.edges], dtype=np.int64)
    dst = np.array([idx[e.j] for e in graph.edges], dtype=np.int64)
    target = np.stack([pix[None, :, :].reshape(M, 2) + e.flow.reshape(M, 2)
                       for e in graph.edges]) if E else np.zeros((0, M, 2))
    weight = np.stack([e.conf.reshape(M, 2) for e in graph.edges]) if E else np.zeros((0, M, 2))
    return pnorm, invd, src, dst, target, weight, M


def _relative_transforms(poses, src, dst):
    E = len(src)
    R_rel = np.empty((E, 3, 3))
    t_rel = np.empty((E, 3))
    inv = [p.inverse() for p in poses]
    for e in range(E):
        A = compose(inv[dst[e]], poses[src[e]])
        R_rel[e] = A.rotation_matrix
        t_rel[e] = A.trans
    return R_rel, t_rel


def _energy(r, valid, weight):
    w = weight * valid[:, :, None]
    return float(np.sum(w * r * r))


def residuals(graph: FrameGraph):
    """Per-edge residual grids and the total weighted energy.

    Returns (res, energy) where res is a list of (rows, cols, 2) arrays
    aligned with graph.edges. Cells reprojecting behind the camera carry
    zero residual and zero weight.
    """
    rows, cols = graph.grid_shape
    pnorm, invd, src, dst, target, weight, M = _pack(graph)
    if not graph.edges:
        return [], 0.0
    R_rel, t_rel = _relative_transforms(graph.poses, src, dst)
    r, valid, *_ = kernels.edge_terms(R_rel, t_rel, pnorm, invd[src], target,
                                      graph.intrinsics, EPSILON_Z, with_jac=False)
    energy = _energy(r, valid, weight)
    return [r[e].reshape(rows, cols, 2) for e in range(len(graph.edges))], energy


def linearize(graph: FrameGraph):
    """Residuals and analytic Jacobians at the current state.

    Returns a dict with arrays r, valid, Jpi, Jpj, Jd of shape (E, M, ...),
    the per-edge source/destination keyframe indices, and the weights.
    Jacobians are of the predicted pixel w.r.t. right-multiplicative pose
    perturbations and source-cell inverse depth.
    """
    pnorm, invd, src, dst, target, weight, M = _pack(graph)
    R_rel, t_rel = _relative_transforms(graph.poses, src, dst)
    r, valid, Jpi, Jpj, Jd = kernels.edge_terms(
        R_rel, t_rel, pnorm, invd[src], target, graph.intrinsics, EPSILON_Z)
    return {"r": r, "valid": valid, "Jpi": Jpi, "Jpj": Jpj, "Jd": Jd,
            "src": src, "dst": dst, "weight": weight, "invd": invd,
            "pnorm": pnorm, "target": target}


def _check_constraints(graph: FrameGraph):
    total = {kf.id: 0.0 for kf in graph.keyframes}
    for e in graph.edges:
        s = float(np.sum(e.conf))
        total[e.i] += s
        total[e.j] += s
    for kf_id, s in total.items():
        if s <= 0.0:
            raise InsufficientConstraints(
                f"keyframe {kf_id} has zero total confidence over all edges")


def _build_normal_equations(lin, n_poses, lam, optimize_depths):
    """Assemble the pose system with per-cell depths Schur-eliminated.

    Returns (H, b, depth_backsub) where depth_backsub recovers the inverse
    depth update from the pose update.
    """
    r, valid, Jpi, Jpj, Jd = lin["r"], lin["valid"], lin["Jpi"], lin["Jpj"], lin["Jd"]
    src, dst, weight = lin["src"], lin["dst"], lin["weight"]
    E, M = valid.shape
    w = weight * valid[:, :, None]  # (E, M, 2)

    H = np.zeros((6 * n_poses, 6 * n_poses))
    b = np.zeros(6 * n_poses)

    # direct pose-pose terms
    for e in range(E):
        si, sj = src[e], dst[e]
        Hi = np.einsum("mca,mc,mcb->ab", Jpi[e], w[e], Jpi[e])
        Hj = np.einsum("mca,mc,mcb->ab", Jpj[e], w[e], Jpj[e])
        Hij = np.einsum("mca,mc,mcb->ab", Jpi[e], w[e], Jpj[e])
        H[6 * si:6 * si + 6, 6 * si:6 * si + 6] += Hi
        H[6 * sj:6 * sj + 6, 6 * sj:6 * sj + 6] += Hj
        H[6 * si:6 * si + 6, 6 * sj:6 * sj + 6] += Hij
        H[6 * sj:6 * sj + 6, 6 * si:6 * si + 6] += Hij.T
        b[6 * si:6 * si + 6] += np.einsum("mca,mc,mc->a", Jpi[e], w[e], r[e])
        b[6 * sj:6 * sj + 6] += np.einsum("mca,mc,mc->a", Jpj[e], w[e], r[e])

    if not optimize_depths:
        return H, b, None

    # depth blocks, grouped by source keyframe
    edges_of = {}
    for e in range(E):
        edges_of.setdefault(int(src[e]), []).append(e)

    schur = []  # (kf index, slots, e_blocks (S, M, 6), denom (M,), wr (M,))
    for k, es in edges_of.items():
        slots = [k] + [int(dst[e]) for e in es]
        S = len(slots)
        e_blk = np.zeros((S, M, 6))
        c = np.zeros(M)
        wr = np.zeros(M)
        for n, e in enumerate(es):
            c += np.einsum("mc,mc,mc->m", Jd[e], w[e], Jd[e])
            wr += np.einsum("mc,mc,mc->m", Jd[e], w[e], r[e])
            e_blk[0] += np.einsum("mca,mc,mc->ma", Jpi[e], w[e], Jd[e])
            e_blk[1 + n] += np.einsum("mca,mc,mc->ma", Jpj[e], w[e], Jd[e])
        denom = c * (1.0 + lam) + 1e-12
        cinv = 1.0 / denom
        for a in range(S):
            ba = 6 * slots[a]
            b[ba:ba + 6] -= np.einsum("m,ma->a", cinv * wr, e_blk[a])
            for bb in range(S):
                bj = 6 * slots[bb]
                H[ba:ba + 6, bj:bj + 6] -= np.einsum("m,ma,mb->ab",
                                                     cinv, e_blk[a], e_blk[bb])
        schur.append((k, slots, e_blk, denom, wr))

    def depth_backsub(dxi_full, invd):
        d_invd = np.zeros_like(invd)
        for k, slots, e_blk, denom, wr in schur:
            acc = wr.copy()
            for a, slot in enumerate(slots):
                acc -= e_blk[a] @ dxi_full[6 * slot:6 * slot + 6]
            d_invd[k] = acc / denom
        return d_invd

    return H, b, depth_backsub


def solve(graph: FrameGraph, opts: SolverOptions | None = None):
    """Damped Gauss-Newton on the joint pose/depth problem.

    Pose 0 is held fixed as the gauge anchor. Returns (solved graph, stats).
    """
    opts = opts or SolverOptions()
    if len(graph.keyframes) < 2 or not graph.edges:
        raise InsufficientConstraints("need >= 2 keyframes and >= 1 edge")
    _check_constraints(graph)

    g = graph.copy()
    rows, cols = g.grid_shape
    M = rows * cols
    n_poses = len(g.keyframes)
    free = np.ones(6 * n_poses, dtype=bool)
    free[:6] = False  # gauge anchor

    _, energy = residuals(g)
    stats = SolveStats(0, energy, energy, False, opts.lambda0)
    lam = opts.lambda0
    fails = 0

    energy_floor = 1e-18 * max(stats.initial_energy, 1.0)
    for it in range(opts.max_iters):
        if energy <= energy_floor:
            stats = SolveStats(it, stats.initial_energy, energy, True, lam)
            return g, stats
        lin = linearize(g)
        accepted = False
        for _ in range(30):  # lambda escalations within one damped step
            H, b, backsub = _build_normal_equations(lin, n_poses, lam,
                                                    opts.optimize_depths)
            Hf = H[np.ix_(free, free)]
            Hf = Hf + lam * np.diag(np.diag(Hf)) + 1e-12 * np.eye(Hf.shape[0])
            try:
                dxi_f = np.linalg.solve(Hf, b[free])
            except np.linalg.LinAlgError:
                dxi_f = np.linalg.lstsq(Hf, b[free], rcond=None)[0]
            dxi = np.zeros(6 * n_poses)
            dxi[free] = dxi_f

            trial = g.copy()
            for k in range(n_poses):
                step = dxi[6 * k:6 * k + 6]
                if np.any(step):
                    trial.poses[k] = compose(trial.poses[k], se3_exp(step))
            if opts.optimize_depths and backsub is not None:
                invd = lin["invd"]
                new_invd = invd + backsub(dxi, invd)
                new_invd = np.clip(new_invd, 1.0 / opts.max_depth, 1.0 / opts.min_depth)
                for k, kf in enumerate(trial.keyframes):
                    kf.depth = (1.0 / new_invd[k]).reshape(rows, cols)

            _, new_energy = residuals(trial)
            if new_energy <= energy:
                rel_dec = (energy - new_energy) / max(energy, 1e-30)
                g = trial
                energy = new_energy
                lam = max(lam / opts.lambda_down, 1e-10)
                fails = 0
                accepted = True
                if rel_dec < opts.rel_tol:
                    stats = SolveStats(it + 1, stats.initial_energy, energy, True, lam)
                    return g, stats
                break
            # proposed step increased the energy
            if energy <= energy_floor or \
                    (new_energy - energy) < opts.rel_tol * max(energy, 1e-30):
                # no meaningfully better point exists: converged at a minimum
                stats = SolveStats(it + 1, stats.initial_energy, energy, True, lam)
                return g, stats
            lam *= opts.lambda_up
        if not accepted:
            fails += 1
            if fails >= opts.patience:
                raise Diverged(
                    f"energy increased for {fails} consecutive damped steps "
                    f"(E={energy:.6g}, lambda={lam:.3g})")
        stats = SolveStats(it + 1, stats.initial_energy, energy, False, lam)

    return g, stats


def select_keyframes(n_frames: int, mean_flow_fn, flow_mag_threshold: float):
    """Greedy keyframe selection on mean background flow magnitude.

    mean_flow_fn(i, j) must return the mean background flow magnitude (px)
    from frame i to frame j. Frame 0 is always kept; a frame is kept when
    its flow from the last kept frame exceeds the threshold.
    """
    if n_frames < 1:
        raise ValueError("empty frame stream")
    kept = [0]
    for f in range(1, n_frames):
        if mean_flow_fn(kept[-1], f) > flow_mag_threshold:
            kept.append(f)
    return kept
