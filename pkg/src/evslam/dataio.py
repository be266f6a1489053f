"""On-disk formats: dataset layout, trajectories, depth maps, clouds, meshes.

Dataset directory layout:
    events.txt                 `t u v p` (p in {0,1} on disk)
    images/<index>.png         8-bit grayscale frames
    images.csv                 `t,index`
    imu.csv                    `t,gx,gy,gz,ax,ay,az`
    calib.txt                  flat key-value intrinsics + extrinsic
    groundtruth.txt            TUM `t x y z qx qy qz qw` (optional)
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

from .geometry import Pose
from .imu import ImuSample
from .tsdf import BLOCK, Mesh, TsdfGrid


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def save_image_png(path, values):
    """values in [0,1] -> 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_image_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=float) / 255.0


def save_mask_png(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path).convert("L")) > 127


# --------------------------------------------------------------------------
# PFM (32-bit float, grayscale)
# --------------------------------------------------------------------------

def save_pfm(path, values):
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")                      # little-endian
        f.write(arr[::-1].tobytes())            # bottom-up row order


def load_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
        return data.reshape(h, w)[::-1].astype(np.float32)


# --------------------------------------------------------------------------
# TUM trajectories
# --------------------------------------------------------------------------

def save_tum(path, stamped_poses):
    """stamped_poses: iterable of (t, Pose); body-in-world convention."""
    with open(path, "w") as f:
        for t, pose in stamped_poses:
            x, y, z = pose.t
            qw, qx, qy, qz = pose.q
            f.write(f"{t:.9f} {x:.9f} {y:.9f} {z:.9f} "
                    f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def load_tum(path):
    out = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 TUM fields")
            t, x, y, z, qx, qy, qz, qw = (float(v) for v in parts)
            out.append((t, Pose(np.array([qw, qx, qy, qz]), np.array([x, y, z]))))
    if any(b[0] < a[0] for a, b in zip(out[:-1], out[1:])):
        raise ValueError(f"{path}: timestamps not sorted")
    return out


# --------------------------------------------------------------------------
# IMU csv and image index
# --------------------------------------------------------------------------

def save_imu_csv(path, samples):
    with open(path, "w") as f:
        f.write("t,gx,gy,gz,ax,ay,az\n")
        for s in samples:
            f.write(f"{s.t:.9f},{s.gyro[0]:.9f},{s.gyro[1]:.9f},{s.gyro[2]:.9f},"
                    f"{s.accel[0]:.9f},{s.accel[1]:.9f},{s.accel[2]:.9f}\n")


def load_imu_csv(path):
    samples = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("t,"):
            raise ValueError(f"{path}: missing imu csv header")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            vals = [float(v) for v in line.split(",")]
            if len(vals) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 imu fields")
            samples.append(ImuSample(t=vals[0], gyro=vals[1:4], accel=vals[4:7]))
    ts = [s.t for s in samples]
    bad = [i for i in range(1, len(ts)) if ts[i] <= ts[i - 1]]
    if bad:
        raise ValueError(f"{path}: non-increasing timestamp at line {bad[0] + 2}")
    return samples


def save_image_index(path, entries):
    """entries: list of (t, index)."""
    with open(path, "w") as f:
        f.write("t,index\n")
        for t, idx in entries:
            f.write(f"{t:.9f},{idx}\n")


def load_image_index(path):
    out = []
    with open(path) as f:
        f.readline()
        for line in f:
            line = line.strip()
            if not line:
                continue
            t, idx = line.split(",")
            out.append((float(t), int(idx)))
    return out


# --------------------------------------------------------------------------
# point clouds and meshes (PLY / OBJ)
# --------------------------------------------------------------------------

def save_cloud_ply(path, points, intensity=None, binary=True):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    gray = (np.clip(intensity if intensity is not None else np.ones(n), 0, 1)
            * 255).astype(np.uint8)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = points.astype(np.float32)
            rec["rgb"] = np.repeat(gray[:, None], 3, axis=1)
            f.write(rec.tobytes())
        else:
            for p, g in zip(points, gray):
                f.write(f"{p[0]} {p[1]} {p[2]} {g} {g} {g}\n".encode())


def save_mesh_ply(path, mesh: Mesh, binary=True):
    n = len(mesh.vertices)
    m = len(mesh.triangles)
    gray = (np.clip(mesh.colors if len(mesh.colors) else np.ones(n), 0, 1)
            * 255).astype(np.uint8)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = mesh.vertices.astype(np.float32)
            rec["rgb"] = np.repeat(gray[:, None], 3, axis=1)
            f.write(rec.tobytes())
            face = np.zeros(m, dtype=[("n", "u1"), ("idx", "<i4", 3)])
            face["n"] = 3
            face["idx"] = mesh.triangles.astype(np.int32)
            f.write(face.tobytes())
        else:
            for p, g in zip(mesh.vertices, gray):
                f.write(f"{p[0]} {p[1]} {p[2]} {g} {g} {g}\n".encode())
            for tri in mesh.triangles:
                f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode())


def load_ply_counts(path):
    """(vertex_count, face_count) from a PLY header; format sanity check."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        nv = nf = 0
        while True:
            line = f.readline()
            if not line or line.strip() == b"end_header":
                break
            parts = line.split()
            if parts[:2] == [b"element", b"vertex"]:
                nv = int(parts[2])
            elif parts[:2] == [b"element", b"face"]:
                nf = int(parts[2])
    return nv, nf


def save_mesh_obj(path, mesh: Mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]} {v[1]} {v[2]}\n")
        for tri in mesh.triangles:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


# --------------------------------------------------------------------------
# DSI and TSDF grid dumps (debug)
# --------------------------------------------------------------------------

def save_dsi(path, dsi):
    h, w, n = dsi.votes.shape
    with open(path, "wb") as f:
        f.write(f"{w} {h} {n} {dsi.depths[0]!r} {dsi.depths[-1]!r}\n".encode())
        f.write(dsi.votes.astype("<f4").tobytes())


def load_dsi_raw(path):
    """(votes (h,w,n), z_min, z_max)."""
    with open(path, "rb") as f:
        w, h, n, zmin, zmax = f.readline().split()
        w, h, n = int(w), int(h), int(n)
        votes = np.frombuffer(f.read(w * h * n * 4), dtype="<f4").reshape(h, w, n)
    return votes.astype(np.float64), float(zmin), float(zmax)


def save_tsdf_grid(path, grid: TsdfGrid):
    with open(path, "wb") as f:
        f.write(f"{grid.eps!r} {grid.d_t!r} {grid.w_max!r} {len(grid.blocks)}\n".encode())
        for key in sorted(grid.blocks.keys()):
            blk = grid.blocks[key]
            f.write(struct.pack("<3q", *key))
            f.write(blk["D"].astype("<f4").tobytes())
            f.write(blk["W"].astype("<f4").tobytes())
            f.write(blk["C"].astype("<f4").tobytes())


def load_tsdf_grid(path) -> TsdfGrid:
    with open(path, "rb") as f:
        eps, d_t, w_max, count = f.readline().split()
        grid = TsdfGrid(float(eps), float(w_max))
        if abs(grid.d_t - float(d_t)) > 1e-12:
            raise ValueError(f"{path}: inconsistent truncation distance")
        nvox = BLOCK**3
        for _ in range(int(count)):
            key = struct.unpack("<3q", f.read(24))
            blk = grid._block(tuple(key), create=True)
            for name in ("D", "W", "C"):
                blk[name][:] = np.frombuffer(
                    f.read(nvox * 4), dtype="<f4"
                ).reshape(BLOCK, BLOCK, BLOCK)
    return grid


# --------------------------------------------------------------------------
# dataset writer used by the synthetic rig
# --------------------------------------------------------------------------

def write_dataset(out_dir, events, frames, frame_times, imu_samples,
                  groundtruth, camera=None, extrinsic=None):
    """Write the full dataset layout the pipeline consumes."""
    from .camera import save_calibration
    from .events import save_events_text

    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    save_events_text(os.path.join(out_dir, "events.txt"), events)
    entries = []
    for k, (t, frame) in enumerate(zip(frame_times, frames)):
        save_image_png(os.path.join(img_dir, f"{k:06d}.png"), frame)
        entries.append((t, k))
    save_image_index(os.path.join(out_dir, "images.csv"), entries)
    save_imu_csv(os.path.join(out_dir, "imu.csv"), imu_samples)
    save_tum(os.path.join(out_dir, "groundtruth.txt"), groundtruth)
    if camera is not None:
        save_calibration(os.path.join(out_dir, "calib.txt"), camera,
                         extrinsic or Pose.identity())


def load_dataset(data_dir):
    """Read the dataset layout back; returns a dict of parts (missing
    groundtruth is allowed, everything else raises)."""
    from .camera import load_calibration
    from .events import load_events_text

    def need(name):
        p = os.path.join(data_dir, name)
        if not os.path.exists(p):
            raise FileNotFoundError(f"dataset is missing {name} under {data_dir}")
        return p

    camera, extrinsic = load_calibration(need("calib.txt"))
    events = load_events_text(need("events.txt"), camera.width, camera.height)
    index = load_image_index(need("images.csv"))
    frames = []
    for t, idx in index:
        frames.append((t, load_image_png(os.path.join(data_dir, "images", f"{idx:06d}.png"))))
    imu = load_imu_csv(need("imu.csv"))
    gt_path = os.path.join(data_dir, "groundtruth.txt")
    groundtruth = load_tum(gt_path) if os.path.exists(gt_path) else None
    return {
        "camera": camera,
        "extrinsic": extrinsic,
        "events": events,
        "frames": frames,
        "imu": imu,
        "groundtruth": groundtruth,
    }
