"""On-disk formats: binary grids, TUM trajectories, joints files, graph dirs.

Binary grid (.egrd): 16-byte header [magic b"EGRD", uint32 version,
uint32 rows, uint32 cols] little-endian, then rows*cols float32
little-endian, row-major. Two-channel fields (flow, confidence) are
stored as separate _u/_v files; boolean masks as 0.0/1.0.

Joints file (.ejnt): 16-byte header [magic b"EJNT", uint32 version,
uint32 frames, uint32 joints], then frames*joints*3 float32 LE.

TUM trajectory: text lines "timestamp tx ty tz qx qy qz qw" (note the
scalar-last quaternion), written with 17 significant digits so a write
and re-read round trip is exact.

A FrameGraph lives in a directory: manifest.yaml plus one file per
keyframe field and per edge field, named by keyframe id / edge pair.
"""

from __future__ import annotations

import os
import struct

import numpy as np
import yaml

from .body_model import BodyParams
from .dba import FlowEdge, FrameGraph, Keyframe
from .errors import FormatError
from .geometry import PinholeIntrinsics, SE3Pose
from .metric_scale import MetricDepthFrame
from .world_composer import Trajectory

GRID_MAGIC = b"EGRD"
JOINTS_MAGIC = b"EJNT"
FORMAT_VERSION = 1


# ------------------------------------------------------------- binary grids

def write_grid(path, grid) -> None:
    grid = np.ascontiguousarray(np.asarray(grid, dtype="<f4"))
    if grid.ndim != 2:
        raise FormatError(f"grid must be 2-D, got shape {grid.shape}")
    rows, cols = grid.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, rows, cols))
        f.write(grid.tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header, got {len(head)} of 16 bytes")
        magic, version, rows, cols = head[:4], *struct.unpack("<III", head[4:])
        if magic != GRID_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        want = rows * cols * 4
        payload = f.read(want)
        if len(payload) < want:
            raise FormatError(
                f"{path}: truncated payload at offset {16 + len(payload)}, "
                f"expected {want} bytes after the header")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


# ------------------------------------------------------------ joints files

def write_joints(path, joints) -> None:
    joints = np.ascontiguousarray(np.asarray(joints, dtype="<f4"))
    if joints.ndim != 3 or joints.shape[2] != 3:
        raise FormatError(f"joints must be (frames, joints, 3), got {joints.shape}")
    with open(path, "wb") as f:
        f.write(JOINTS_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, joints.shape[0], joints.shape[1]))
        f.write(joints.tobytes())


def read_joints(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header, got {len(head)} of 16 bytes")
        magic, version, frames, joints = head[:4], *struct.unpack("<III", head[4:])
        if magic != JOINTS_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        want = frames * joints * 3 * 4
        payload = f.read(want)
        if len(payload) < want:
            raise FormatError(
                f"{path}: truncated payload at offset {16 + len(payload)}, "
                f"expected {want} bytes after the header")
    return (np.frombuffer(payload, dtype="<f4")
            .reshape(frames, joints, 3).astype(np.float64))


# --------------------------------------------------------- TUM trajectories

def write_tum(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        for t, p in zip(traj.times, traj.poses):
            w, x, y, z = p.quat
            tx, ty, tz = p.trans
            f.write(f"{t:.17g} {tx:.17g} {ty:.17g} {tz:.17g} "
                    f"{x:.17g} {y:.17g} {z:.17g} {w:.17g}\n")


def read_tum(path) -> Trajectory:
    times, poses = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as e:
                raise FormatError(f"{path}:{ln}: {e}") from None
            times.append(t)
            poses.append(SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    if not times:
        raise FormatError(f"{path}: no poses")
    return Trajectory(np.arange(len(poses)), np.array(times), poses)


# ----------------------------------------------------- FrameGraph directory

def save_frame_graph(dirpath, graph: FrameGraph, true_scale: float | None = None
                     ) -> None:
    os.makedirs(dirpath, exist_ok=True)
    K = graph.intrinsics
    manifest = {
        "format_version": FORMAT_VERSION,
        "intrinsics": {"fx": float(K.fx), "fy": float(K.fy), "cx": float(K.cx),
                       "cy": float(K.cy), "width": int(K.width),
                       "height": int(K.height)},
        "stride": int(graph.stride),
        "keyframe_ids": [int(kf.id) for kf in graph.keyframes],
        "timestamps": [float(t) for t in graph.timestamps],
        "edges": [[int(e.i), int(e.j)] for e in graph.edges],
    }
    if true_scale is not None:
        manifest["true_scale"] = float(true_scale)
    with open(os.path.join(dirpath, "manifest.yaml"), "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    traj = Trajectory(np.array([kf.id for kf in graph.keyframes]),
                      np.array(graph.timestamps), graph.poses)
    write_tum(os.path.join(dirpath, "poses.tum"), traj)
    for kf in graph.keyframes:
        write_grid(os.path.join(dirpath, f"kf_{kf.id}_depth.egrd"), kf.depth)
        write_grid(os.path.join(dirpath, f"kf_{kf.id}_mask.egrd"),
                   kf.mask.astype(np.float64))
    for e in graph.edges:
        stem = os.path.join(dirpath, f"edge_{e.i}_{e.j}")
        write_grid(stem + "_flow_u.egrd", e.flow[:, :, 0])
        write_grid(stem + "_flow_v.egrd", e.flow[:, :, 1])
        write_grid(stem + "_conf_u.egrd", e.conf[:, :, 0])
        write_grid(stem + "_conf_v.egrd", e.conf[:, :, 1])


def load_frame_graph(dirpath) -> FrameGraph:
    mpath = os.path.join(dirpath, "manifest.yaml")
    if not os.path.exists(mpath):
        raise FormatError(f"{mpath}: missing manifest")
    with open(mpath) as f:
        try:
            m = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise FormatError(f"{mpath}: {e}") from None
    try:
        ki = m["intrinsics"]
        K = PinholeIntrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"],
                              ki["width"], ki["height"])
        stride = int(m["stride"])
        ids = [int(i) for i in m["keyframe_ids"]]
        times = [float(t) for t in m["timestamps"]]
        edge_pairs = [(int(i), int(j)) for i, j in m["edges"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{mpath}: missing or malformed key: {e}") from None
    kfs = []
    for i in ids:
        depth = read_grid(os.path.join(dirpath, f"kf_{i}_depth.egrd"))
        mask = read_grid(os.path.join(dirpath, f"kf_{i}_mask.egrd")) > 0.5
        kfs.append(Keyframe(i, depth, mask))
    edges = []
    for i, j in edge_pairs:
        stem = os.path.join(dirpath, f"edge_{i}_{j}")
        flow = np.stack([read_grid(stem + "_flow_u.egrd"),
                         read_grid(stem + "_flow_v.egrd")], axis=-1)
        conf = np.stack([read_grid(stem + "_conf_u.egrd"),
                         read_grid(stem + "_conf_v.egrd")], axis=-1)
        edges.append(FlowEdge(i, j, flow, conf))
    traj = read_tum(os.path.join(dirpath, "poses.tum"))
    if len(traj) != len(kfs):
        raise FormatError(f"{dirpath}: {len(traj)} poses but {len(kfs)} keyframes")
    return FrameGraph(K, stride, kfs, edges, list(traj.poses), times)


def read_true_scale(dirpath) -> float | None:
    with open(os.path.join(dirpath, "manifest.yaml")) as f:
        m = yaml.safe_load(f)
    ts = m.get("true_scale")
    return float(ts) if ts is not None else None


# ------------------------------------------------------ metric depth files

def save_metric_depths(dirpath, ids, depths) -> None:
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "manifest.yaml"), "w") as f:
        yaml.safe_dump({"format_version": FORMAT_VERSION,
                        "keyframe_ids": [int(i) for i in ids]}, f, sort_keys=True)
    for i, D in zip(ids, depths):
        write_grid(os.path.join(dirpath, f"depth_{i}.egrd"), D.depth)
        write_grid(os.path.join(dirpath, f"depth_{i}_valid.egrd"),
                   D.valid.astype(np.float64))


def load_metric_depths(dirpath):
    mpath = os.path.join(dirpath, "manifest.yaml")
    if not os.path.exists(mpath):
        raise FormatError(f"{mpath}: missing manifest")
    with open(mpath) as f:
        m = yaml.safe_load(f)
    out = []
    for i in m["keyframe_ids"]:
        depth = read_grid(os.path.join(dirpath, f"depth_{i}.egrd"))
        valid = read_grid(os.path.join(dirpath, f"depth_{i}_valid.egrd")) > 0.5
        out.append(MetricDepthFrame(depth, valid))
    return out


# -------------------------------------------------------- body params file

def save_body_params(path, params: list[BodyParams]) -> None:
    np.savez(path,
             version=np.int64(FORMAT_VERSION),
             theta=np.stack([p.theta for p in params]),
             beta=np.stack([p.beta for p in params]),
             root_rot=np.stack([p.root_rot for p in params]),
             root_trans=np.stack([p.root_trans for p in params]))


def load_body_params(path) -> list[BodyParams]:
    try:
        with np.load(path) as z:
            theta, beta = z["theta"], z["beta"]
            root_rot, root_trans = z["root_rot"], z["root_trans"]
    except (KeyError, OSError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    return [BodyParams(theta[i], beta[i], root_rot[i], root_trans[i])
            for i in range(len(theta))]
