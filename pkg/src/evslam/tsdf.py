"""Truncated signed distance fusion on a block-sparse voxel grid, with
grouped raycasting and marching-cubes surface extraction.

Updates follow the running weighted mean
    D_new = (W_last * D_last + w * d) / (W_last + w),
    W_new = min(W_last + w, W_max),
with d the ray-signed distance from voxel center to the depth point and w
a behind-surface drop-off weight built from the point's depth rho.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._mc_tables import EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .camera import CameraModel
from .geometry import Pose

BLOCK = 8


def signed_distance(V, P, O) -> float:
    """||P - V|| signed positive in front of the surface (camera side)."""
    V = np.asarray(V, dtype=float)
    P = np.asarray(P, dtype=float)
    O = np.asarray(O, dtype=float)
    if np.allclose(P, O):
        raise ValueError("depth point coincides with the camera origin")
    diff = P - V
    return float(np.linalg.norm(diff) * np.sign(np.dot(diff, P - O)))


def point_weight(d: float, rho: float, eps: float):
    """Drop-off weight: 1/rho^2 in front, linear ramp to zero across the
    band [-d_t, -eps) behind the surface, zero past -d_t (d_t = 4 eps)."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    d_t = 4.0 * eps
    d = np.asarray(d, dtype=float)
    base = 1.0 / rho**2
    w = np.where(
        d >= -eps,
        base,
        np.where(d >= -d_t, base * (d + d_t) / (d_t - eps), 0.0),
    )
    return float(w) if w.ndim == 0 else w


def update_voxel(D_last: float, W_last: float, d: float, w: float,
                 d_t: float, W_max: float):
    """One fusion step; d is clamped to the truncation band before blending."""
    if w < 0:
        raise ValueError("weight must be non-negative")
    if W_last + w == 0.0:
        return D_last, W_last
    d = float(np.clip(d, -d_t, d_t))
    D_new = (W_last * D_last + w * d) / (W_last + w)
    W_new = min(W_last + w, W_max)
    return D_new, W_new


class TsdfGrid:
    """Sparse map of 8^3 voxel blocks; absent blocks mean W = 0."""

    def __init__(self, voxel_size: float = 0.01, w_max: float = 100.0):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.eps = float(voxel_size)
        self.d_t = 4.0 * self.eps
        self.w_max = float(w_max)
        self.blocks: dict = {}
        self.rays_cast = 0

    def _block(self, key, create: bool):
        blk = self.blocks.get(key)
        if blk is None and create:
            blk = {
                "D": np.zeros((BLOCK, BLOCK, BLOCK)),
                "W": np.zeros((BLOCK, BLOCK, BLOCK)),
                "C": np.zeros((BLOCK, BLOCK, BLOCK)),
            }
            self.blocks[key] = blk
        return blk

    def voxel_index(self, point):
        return np.floor(np.asarray(point, dtype=float) / self.eps).astype(np.int64)

    def voxel_center(self, index):
        return (np.asarray(index, dtype=float) + 0.5) * self.eps

    def read(self, index):
        """(D, W, color) of one voxel by global integer index."""
        i, j, k = (int(v) for v in index)
        key = (i // BLOCK, j // BLOCK, k // BLOCK)
        blk = self.blocks.get(key)
        if blk is None:
            return 0.0, 0.0, 0.0
        li, lj, lk = i % BLOCK, j % BLOCK, k % BLOCK
        w = blk["W"][li, lj, lk]
        c = blk["C"][li, lj, lk] / w if w > 0 else 0.0
        return float(blk["D"][li, lj, lk]), float(w), float(c)

    def update(self, index, d, w, color=0.0):
        i, j, k = (int(v) for v in index)
        key = (i // BLOCK, j // BLOCK, k // BLOCK)
        blk = self._block(key, create=True)
        li, lj, lk = i % BLOCK, j % BLOCK, k % BLOCK
        D0 = blk["D"][li, lj, lk]
        W0 = blk["W"][li, lj, lk]
        D1, W1 = update_voxel(D0, W0, d, w, self.d_t, self.w_max)
        blk["D"][li, lj, lk] = D1
        blk["W"][li, lj, lk] = W1
        blk["C"][li, lj, lk] += w * color

    @property
    def voxel_count(self):
        return sum(int(np.count_nonzero(b["W"] > 0)) for b in self.blocks.values())


def _ray_voxels(O, P, eps, d_t, full_ray: bool):
    """Integer voxel indices along segment [near, far] on the ray O->P,
    by 3D DDA stepping (each voxel the segment passes through, once)."""
    O = np.asarray(O, dtype=float)
    P = np.asarray(P, dtype=float)
    length = np.linalg.norm(P - O)
    if length < 1e-12:
        return []
    u = (P - O) / length
    s0 = 0.0 if full_ray else max(length - d_t, 0.0)
    s1 = length + d_t
    start = O + s0 * u
    idx = np.floor(start / eps).astype(np.int64)
    step = np.where(u > 0, 1, np.where(u < 0, -1, 0)).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(u != 0, eps / np.abs(u), np.inf)
        next_bound = np.where(
            step > 0, (idx + 1) * eps, np.where(step < 0, idx * eps, np.inf)
        )
        t_max = np.where(u != 0, (next_bound - start) / u, np.inf)
    out = [tuple(idx)]
    s = 0.0   # distance along the ray measured from the segment start
    guard = 0
    max_steps = int(3 * (s1 - s0) / eps) + 8
    while s < s1 - s0 and guard < max_steps:
        axis = int(np.argmin(t_max))
        s = t_max[axis]
        if s0 + s > s1:
            break
        idx = idx.copy()
        idx[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        out.append(tuple(idx))
        guard += 1
    return out


def integrate_depth_map(grid: TsdfGrid, depth: np.ndarray, valid: np.ndarray,
                        pose: Pose, camera: CameraModel,
                        color: Optional[np.ndarray] = None,
                        full_ray_update: bool = False) -> TsdfGrid:
    """Fuse one depth map taken from ``pose`` (camera-in-world).

    Depth points are grouped by their containing voxel; each group casts a
    single ray through its weighted-mean position, carrying the group's
    combined weight. rho is the point's depth in the camera frame.
    """
    ys, xs = np.nonzero(valid)
    if len(ys) == 0:
        return grid
    z = depth[ys, xs].astype(float)
    px = np.stack([xs.astype(float), ys.astype(float)], axis=-1)
    xn = camera.pixel_to_normalized(px)
    pts_cam = np.column_stack([xn[:, 0] * z, xn[:, 1] * z, z])
    pts_w = pose.act(pts_cam)
    cols = color[ys, xs].astype(float) if color is not None else np.zeros(len(ys))
    O = pose.t

    # group points by containing voxel, weighted by 1/rho^2
    vidx = np.floor(pts_w / grid.eps).astype(np.int64)
    key = (vidx[:, 0] + (1 << 20)) * (1 << 42) + (vidx[:, 1] + (1 << 20)) * (1 << 21) \
        + (vidx[:, 2] + (1 << 20))
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    boundaries = np.flatnonzero(np.r_[True, np.diff(key_s) != 0])
    counts = np.diff(np.r_[boundaries, len(key_s)])

    w_pt = 1.0 / np.maximum(z[order], 1e-9) ** 2
    for b, n in zip(boundaries, counts):
        sel = order[b : b + n]
        ws = w_pt[b : b + n]
        wsum = ws.sum()
        P_mean = (pts_w[sel] * ws[:, None]).sum(axis=0) / wsum
        c_mean = float((cols[sel] * ws).sum() / wsum)
        rho = float(np.linalg.norm(pose.inverse().act(P_mean)[2]))
        rho = max(rho, 1e-9)
        grid.rays_cast += 1
        for voxel in _ray_voxels(O, P_mean, grid.eps, grid.d_t, full_ray_update):
            V = grid.voxel_center(voxel)
            d = signed_distance(V, P_mean, O)
            w = point_weight(d, rho, grid.eps) * float(n)
            if w > 0:
                grid.update(voxel, d, w, c_mean)
    return grid


# --------------------------------------------------------------------------
# analytic fills (testing / bootstrap)
# --------------------------------------------------------------------------

def fill_grid_from_sdf(grid: TsdfGrid, sdf, lo, hi, weight: float = 1.0):
    """Evaluate an analytic signed-distance function (vectorized over (N,3)
    points) on all voxel centers in [lo, hi] and write the truncation band
    directly (no camera involved)."""
    lo_idx = grid.voxel_index(lo)
    hi_idx = grid.voxel_index(hi)
    ii, jj, kk = np.mgrid[
        lo_idx[0] : hi_idx[0] + 1,
        lo_idx[1] : hi_idx[1] + 1,
        lo_idx[2] : hi_idx[2] + 1,
    ]
    idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
    centers = (idx + 0.5) * grid.eps
    d = np.asarray(sdf(centers), dtype=float).ravel()
    mask = np.abs(d) <= grid.d_t
    idx = idx[mask]
    d = np.clip(d[mask], -grid.d_t, grid.d_t)
    w = min(weight, grid.w_max)
    bkey = idx // BLOCK
    lidx = idx - bkey * BLOCK
    flat = (bkey[:, 0] << 42) + (bkey[:, 1] << 21) + bkey[:, 2]
    order = np.argsort(flat, kind="stable")
    flat_s = flat[order]
    bounds = np.flatnonzero(np.r_[True, np.diff(flat_s) != 0])
    counts = np.diff(np.r_[bounds, len(flat_s)])
    for b, n in zip(bounds, counts):
        sel = order[b : b + n]
        key = tuple(int(v) for v in bkey[sel[0]])
        blk = grid._block(key, create=True)
        li = lidx[sel]
        blk["D"][li[:, 0], li[:, 1], li[:, 2]] = d[sel]
        blk["W"][li[:, 0], li[:, 1], li[:, 2]] = w
    return grid


# --------------------------------------------------------------------------
# marching cubes
# --------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray                 # (N, 3) meters
    triangles: np.ndarray                # (M, 3) int indices
    colors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def triangle_normals(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-15)


def _gather_padded(grid: TsdfGrid, key):
    """Block arrays padded by one voxel from the +x/+y/+z neighbors."""
    D = np.zeros((BLOCK + 1, BLOCK + 1, BLOCK + 1))
    W = np.zeros((BLOCK + 1, BLOCK + 1, BLOCK + 1))
    C = np.zeros((BLOCK + 1, BLOCK + 1, BLOCK + 1))
    for (dx, dy, dz) in (
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1),
    ):
        nb = grid.blocks.get((key[0] + dx, key[1] + dy, key[2] + dz))
        if nb is None:
            continue
        sx = slice(BLOCK, BLOCK + 1) if dx else slice(0, BLOCK)
        sy = slice(BLOCK, BLOCK + 1) if dy else slice(0, BLOCK)
        sz = slice(BLOCK, BLOCK + 1) if dz else slice(0, BLOCK)
        take = (slice(0, 1) if dx else slice(None),
                slice(0, 1) if dy else slice(None),
                slice(0, 1) if dz else slice(None))
        D[sx, sy, sz] = nb["D"][take]
        W[sx, sy, sz] = nb["W"][take]
        C[sx, sy, sz] = nb["C"][take]
    return D, W, C


_CORNER_SHIFTS = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                  (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]


def extract_mesh(grid: TsdfGrid, min_area: float = 1e-14) -> Mesh:
    """Marching cubes over voxel-center cubes; cubes with any zero-weight
    corner are skipped, vertices interpolate the zero crossing of D."""
    vertices = []
    colors = []
    triangles = []
    vert_cache = {}

    def emit_vertex(p, c):
        keyq = (round(p[0] / grid.eps * 1024), round(p[1] / grid.eps * 1024),
                round(p[2] / grid.eps * 1024))
        idx = vert_cache.get(keyq)
        if idx is None:
            idx = len(vertices)
            vertices.append(p)
            colors.append(c)
            vert_cache[keyq] = idx
        return idx

    edge_table_np = np.asarray(EDGE_TABLE, dtype=np.int64)
    for key in sorted(grid.blocks.keys()):
        D, W, C = _gather_padded(grid, key)
        occupied = W > 0
        inside = D < 0.0
        # cube qualifies when all 8 corners carry weight; cube_index built
        # vectorized so the python loop only visits surface-crossing cubes
        all_w = np.ones((BLOCK, BLOCK, BLOCK), dtype=bool)
        index_vol = np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.int64)
        for bit, (cx, cy, cz) in enumerate(_CORNER_SHIFTS):
            sub = (slice(cx, cx + BLOCK), slice(cy, cy + BLOCK), slice(cz, cz + BLOCK))
            all_w &= occupied[sub]
            index_vol |= inside[sub].astype(np.int64) << bit
        crossing = all_w & (edge_table_np[index_vol] != 0)
        if not np.any(crossing):
            continue
        base = np.array(key, dtype=np.int64) * BLOCK
        for (ix, iy, iz) in np.argwhere(crossing):
            corner_vals = []
            corner_pos = []
            corner_col = []
            cube_index = 0
            for bit, (cx, cy, cz) in enumerate(_CORNER_SHIFTS):
                v = D[ix + cx, iy + cy, iz + cz]
                w = W[ix + cx, iy + cy, iz + cz]
                corner_vals.append(v)
                corner_col.append(C[ix + cx, iy + cy, iz + cz] / w)
                corner_pos.append(grid.voxel_center(base + [ix + cx, iy + cy, iz + cz]))
                if v < 0.0:
                    cube_index |= 1 << bit
            if EDGE_TABLE[cube_index] == 0:
                continue
            edge_vertex = [None] * 12
            for e in range(12):
                if EDGE_TABLE[cube_index] & (1 << e):
                    a, b = EDGE_CORNERS[e]
                    va, vb = corner_vals[a], corner_vals[b]
                    t = va / (va - vb) if va != vb else 0.5
                    p = corner_pos[a] + t * (corner_pos[b] - corner_pos[a])
                    c = corner_col[a] + t * (corner_col[b] - corner_col[a])
                    edge_vertex[e] = emit_vertex(p, c)
            tri = TRI_TABLE[cube_index]
            for s in range(0, len(tri), 3):
                ia, ib, ic = (edge_vertex[tri[s]], edge_vertex[tri[s + 1]],
                              edge_vertex[tri[s + 2]])
                pa, pb, pc = (np.asarray(vertices[ia]), np.asarray(vertices[ib]),
                              np.asarray(vertices[ic]))
                area = 0.5 * np.linalg.norm(np.cross(pb - pa, pc - pa))
                if area > min_area:
                    triangles.append((ia, ib, ic))

    if not vertices:
        return Mesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=int),
                    colors=np.zeros(0))
    return Mesh(
        vertices=np.asarray(vertices, dtype=float),
        triangles=np.asarray(triangles, dtype=int) if triangles else np.zeros((0, 3), dtype=int),
        colors=np.asarray(colors, dtype=float),
    )
