"""Command-line driver: simulate -> solve -> scale -> compose -> evaluate.

Each subcommand is a single deterministic process communicating through
files; exit code 0 on success, 2 on parse/missing-input problems, 3 on
numerical failures (divergence, no usable frames, frame mismatch).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import yaml

from . import gridio
from .body_model import load_body_model, save_body_model
from .dba import SolverOptions, apply_dual_mask, solve
from .errors import (Diverged, EmptyScene, EngineError, FormatError,
                     FrameMismatch, NoValidFrames)
from .geometry import SE3Pose, so3_exp
from .metric_scale import (ScaleOptions, estimate_sequence_scale,
                           pseudo_rgbd_baseline, rescale)
from .metrics import MetricsReport, accel_error, ate, global_traj_metrics, \
    mpjpe_family, w_mpjpe_100
from .scene_sim import NoiseSpec, PathSpec, SceneSpec, generate, preset
from .world_composer import Trajectory, WorldMotion, compose_world

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise FormatError(f"{path}: config file not found") from None
    except yaml.YAMLError as e:
        raise FormatError(f"{path}: {e}") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config must be a mapping")
    return cfg


def _opt(args, cfg, key, default):
    """Flag wins over config key wins over default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in cfg:
        return cfg[key]
    return default


def _path_spec(d):
    if d is None:
        return None
    allowed = {f.name for f in dataclasses.fields(PathSpec)}
    bad = set(d) - allowed
    if bad:
        raise FormatError(f"unknown path keys {sorted(bad)}")
    d = dict(d)
    for k in ("start", "direction", "center"):
        if k in d:
            d[k] = tuple(d[k])
    return PathSpec(**d)


def _scene_from_yaml(path):
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise FormatError(f"{path}: scene spec not found") from None
    except yaml.YAMLError as e:
        raise FormatError(f"{path}: {e}") from None
    scene_d = dict(doc.get("scene", {}))
    noise_d = dict(doc.get("noise", {}))
    for k in ("camera", "human"):
        if k in scene_d:
            scene_d[k] = _path_spec(scene_d[k])
    try:
        spec = SceneSpec(**scene_d)
        noise = NoiseSpec(**noise_d)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    return spec, noise


# ------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg):
    seed = int(_opt(args, cfg, "seed", 0))
    if args.spec is not None:
        spec, noise = _scene_from_yaml(args.spec)
        spec = dataclasses.replace(spec, seed=seed)
    else:
        spec, noise = preset(_opt(args, cfg, "preset", "line-clean"), seed)
    try:
        bundle = generate(spec, noise)
    except (EmptyScene, ValueError) as e:
        raise FormatError(f"invalid scene spec: {e}") from None
    out = args.out
    os.makedirs(out, exist_ok=True)
    gridio.save_frame_graph(os.path.join(out, "graph"), bundle.graph,
                            true_scale=bundle.true_scale)
    ids = [kf.id for kf in bundle.graph.keyframes]
    gridio.save_metric_depths(os.path.join(out, "depths"), ids,
                              bundle.metric_depths)
    gridio.write_tum(os.path.join(out, "gt_cam.tum"), bundle.gt_cam)
    if bundle.gt_root is not None:
        gridio.write_tum(os.path.join(out, "gt_root.tum"), bundle.gt_root)
        gridio.write_joints(os.path.join(out, "gt_joints.ejnt"),
                            bundle.joints_world)
        gridio.save_body_params(os.path.join(out, "body_params.npz"),
                                bundle.body_params)
        save_body_model(bundle.body_model, os.path.join(out, "body_model.npz"))
    print(f"simulated {len(ids)} keyframes, {len(bundle.graph.edges)} edges "
          f"-> {out}")
    return EXIT_OK


def _solver_options(args, cfg):
    return SolverOptions(
        max_iters=int(_opt(args, cfg, "max_iters", 50)),
        rel_tol=float(_opt(args, cfg, "rel_tol", 1e-6)))


def cmd_solve(args, cfg):
    graph = gridio.load_frame_graph(args.graph)
    if args.init == "identity":
        graph.poses = [SE3Pose.identity() for _ in graph.poses]
        med = float(np.median(np.stack([kf.depth for kf in graph.keyframes])))
        for kf in graph.keyframes:
            kf.depth = np.full_like(kf.depth, med)
    if not args.no_mask:
        graph = apply_dual_mask(graph)
    solved, stats = solve(graph, _solver_options(args, cfg))
    os.makedirs(args.out, exist_ok=True)
    gridio.save_frame_graph(os.path.join(args.out, "graph"), solved)
    traj = Trajectory(np.array([kf.id for kf in solved.keyframes]),
                      np.array(solved.timestamps), solved.poses)
    gridio.write_tum(os.path.join(args.out, "poses.tum"), traj)
    print(f"iterations {stats.iterations} energy {stats.initial_energy:.6g} "
          f"-> {stats.final_energy:.6g} converged {stats.converged}")
    return EXIT_OK


def _scale_options(args, cfg):
    return ScaleOptions(
        c=float(_opt(args, cfg, "c", 0.5)),
        near=float(_opt(args, cfg, "near", 0.5)),
        far=float(_opt(args, cfg, "far", 12.0)),
        min_valid=int(_opt(args, cfg, "min_valid", 64)))


def cmd_scale(args, cfg):
    graph = gridio.load_frame_graph(args.graph)
    if not os.path.isdir(args.depths):
        raise FormatError(f"{args.depths}: depth directory not found")
    depths = gridio.load_metric_depths(args.depths)
    os.makedirs(args.out, exist_ok=True)
    if args.pseudo_rgbd:
        solved, stats = pseudo_rgbd_baseline(graph, depths,
                                             _solver_options(args, cfg))
        traj = Trajectory(np.array([kf.id for kf in solved.keyframes]),
                          np.array(solved.timestamps), solved.poses)
        gridio.write_tum(os.path.join(args.out, "poses_scaled.tum"), traj)
        print(f"pseudo-rgbd baseline: iterations {stats.iterations} "
              f"converged {stats.converged}")
        return EXIT_OK
    est = estimate_sequence_scale(graph, depths, _scale_options(args, cfg))
    scaled = rescale(graph, est.alpha)
    traj = Trajectory(np.array([kf.id for kf in scaled.keyframes]),
                      np.array(scaled.timestamps), scaled.poses)
    gridio.write_tum(os.path.join(args.out, "poses_scaled.tum"), traj)
    with open(os.path.join(args.out, "scale.yaml"), "w") as f:
        yaml.safe_dump({"alpha": est.alpha,
                        "per_keyframe": [[int(i), float(a), float(w)]
                                         for i, a, w in est.per_keyframe]},
                       f, sort_keys=True)
    print(f"alpha {est.alpha:.9g} from {len(est.per_keyframe)} keyframes")
    return EXIT_OK


def cmd_compose(args, cfg):
    cam = gridio.read_tum(args.cam)
    body = gridio.load_body_params(args.body)
    model = load_body_model(args.model)
    T = [SE3Pose.from_rotation_translation(so3_exp(p.root_rot), p.root_trans)
         for p in body]
    world = compose_world(cam, T, body, model)
    os.makedirs(args.out, exist_ok=True)
    gridio.write_tum(os.path.join(args.out, "world_root.tum"), world.root)
    gridio.write_joints(os.path.join(args.out, "world_joints.ejnt"),
                        world.joints_world)
    print(f"composed {len(world.root)} frames -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    report = MetricsReport()
    fps = float(_opt(args, cfg, "fps", 10.0))
    if args.pred_cam and args.gt_cam:
        p, g = gridio.read_tum(args.pred_cam), gridio.read_tum(args.gt_cam)
        report.ate_m = ate(p, g, use_estimated_scale=False)
        report.ate_s_m = ate(p, g, use_estimated_scale=True)
        report.frames = len(p)
    pj = gj = None
    if args.pred_joints and args.gt_joints:
        pj = gridio.read_joints(args.pred_joints)
        gj = gridio.read_joints(args.gt_joints)
        if pj.shape != gj.shape:
            raise FrameMismatch(f"joints {pj.shape} vs {gj.shape}")
        report.mpjpe_mm = mpjpe_family(pj, gj, mode="mpjpe")
        report.pa_mpjpe_mm = mpjpe_family(pj, gj, mode="pa_mpjpe")
        if len(pj) >= 3:
            report.accel_m_s2 = accel_error(pj, gj, fps)
        report.frames = len(pj)
    if args.pred_root and args.gt_root:
        pr, gr = gridio.read_tum(args.pred_root), gridio.read_tum(args.gt_root)
        if len(pr) != len(gr):
            raise FrameMismatch(f"{len(pr)} vs {len(gr)} root poses")
        if pj is None:
            pj = np.zeros((len(pr), 1, 3))
            gj = np.zeros((len(gr), 1, 3))
        pw = WorldMotion(pr, [None] * len(pr), pj)
        gw = WorldMotion(gr, [None] * len(gr), gj)
        if pj.shape[1] > 1 or np.any(pj):
            seg = int(_opt(args, cfg, "segment_len", 100))
            report.w_mpjpe100_mm = w_mpjpe_100(pw, gw, "first_two", seg)
            report.wa_mpjpe100_mm = w_mpjpe_100(pw, gw, "whole_segment", seg)
            report.segments = max(1, (len(pr) + seg - 1) // seg)
        align = _opt(args, cfg, "alignment", "se3")
        rte, roe, erve = global_traj_metrics(pw, gw, align)
        report.rte_m, report.roe_deg, report.erve_mm_per_frame = rte, roe, erve
        report.frames = len(pr)
    os.makedirs(args.out, exist_ok=True)
    text = report.to_text()
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="engine",
                                description="metric-scale trajectory engine")
    p.add_argument("--config", help="YAML config; flags override its keys")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic bundle")
    s.add_argument("--preset", help="named scene preset")
    s.add_argument("--spec", help="YAML scene/noise spec file")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("solve", help="run the masked bundle adjustment")
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-mask", action="store_true")
    s.add_argument("--init", choices=["stored", "identity"], default="identity")
    s.add_argument("--max-iters", dest="max_iters", type=int)
    s.add_argument("--rel-tol", dest="rel_tol", type=float)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("scale", help="estimate metric scale and rescale")
    s.add_argument("--graph", required=True)
    s.add_argument("--depths", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pseudo-rgbd", dest="pseudo_rgbd", action="store_true")
    s.add_argument("-c", dest="c", type=float)
    s.add_argument("--near", type=float)
    s.add_argument("--far", type=float)
    s.add_argument("--min-valid", dest="min_valid", type=int)
    s.add_argument("--max-iters", dest="max_iters", type=int)
    s.add_argument("--rel-tol", dest="rel_tol", type=float)
    s.set_defaults(func=cmd_scale)

    s = sub.add_parser("compose", help="lift body motion into the world frame")
    s.add_argument("--cam", required=True)
    s.add_argument("--body", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("evaluate", help="compute metrics from artifact files")
    s.add_argument("--pred-cam")
    s.add_argument("--gt-cam")
    s.add_argument("--pred-joints")
    s.add_argument("--gt-joints")
    s.add_argument("--pred-root")
    s.add_argument("--gt-root")
    s.add_argument("--fps", type=float)
    s.add_argument("--segment-len", dest="segment_len", type=int)
    s.add_argument("--alignment", choices=["se3", "yaw"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("ENGINE_THREADS")
    if threads:
        os.environ.setdefault("NUMBA_NUM_THREADS", threads)
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = {}
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (FormatError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (Diverged, NoValidFrames, FrameMismatch) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except EngineError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
