"""Image-guided dense depth completion.

The RV intensity image is segmented by region growing; holes in the
semi-dense depth are then filled in fast-marching order (increasing
distance-to-boundary T, with ||grad T|| = 1) by a weighted average of known
or already-filled depths inside an epsilon-disk restricted to the pixel's
own segment. Weights combine march direction, distance, level-set
proximity, and intensity similarity; the result is a per-segment convex
combination of seed depths.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .camera import CameraModel
from .space_sweep import ReferenceView, SemiDenseDepthMap

KNOWN, BAND, UNKNOWN = 0, 1, 2
INF = np.inf


@dataclass
class SegmentationMap:
    labels: np.ndarray      # (h, w) int, every pixel labeled
    count: int


@dataclass
class DistanceMap:
    T: np.ndarray           # (h, w) distance to the initially-known boundary
    state: np.ndarray       # (h, w) in {KNOWN, BAND, UNKNOWN}


@dataclass
class DenseDepthMap:
    depth: np.ndarray
    valid: np.ndarray
    provenance: np.ndarray  # 0 = measured, 1 = inpainted
    seedless_segments: Optional[list] = None


# --------------------------------------------------------------------------
# region growing
# --------------------------------------------------------------------------

def region_grow_segment(image: np.ndarray, intensity_tolerance: float = 0.08,
                        min_segment_px: int = 30) -> SegmentationMap:
    """Flood fill from raster-scan seeds; a pixel joins when its intensity is
    within tolerance of the region's running mean; undersized segments merge
    into the most similar 4-connected neighbor."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    means = []
    next_label = 0
    from collections import deque

    for sy in range(h):
        for sx in range(w):
            if labels[sy, sx] != -1:
                continue
            q = deque([(sy, sx)])
            labels[sy, sx] = next_label
            total = img[sy, sx]
            count = 1
            while q:
                y, x = q.popleft()
                mean = total / count
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] == -1:
                        if abs(img[ny, nx] - mean) <= intensity_tolerance:
                            labels[ny, nx] = next_label
                            total += img[ny, nx]
                            count += 1
                            q.append((ny, nx))
            means.append(total / count)
            next_label += 1

    labels, count = _merge_small_segments(img, labels, next_label, min_segment_px)
    return SegmentationMap(labels=labels, count=count)


def _merge_small_segments(img, labels, n_labels, min_segment_px):
    if n_labels == 0:
        return labels, 0
    for _ in range(8):   # small islands can cascade into other small islands
        sizes = np.bincount(labels.ravel(), minlength=n_labels)
        small = np.flatnonzero((sizes > 0) & (sizes < min_segment_px))
        if len(small) == 0:
            break
        sums = np.bincount(labels.ravel(), weights=img.ravel(), minlength=n_labels)
        means = np.where(sizes > 0, sums / np.maximum(sizes, 1), 0.0)
        # adjacency via horizontal/vertical label transitions
        pairs = set()
        a, b = labels[:, :-1], labels[:, 1:]
        mask = a != b
        pairs.update(zip(a[mask].tolist(), b[mask].tolist()))
        a, b = labels[:-1, :], labels[1:, :]
        mask = a != b
        pairs.update(zip(a[mask].tolist(), b[mask].tolist()))
        neighbors = {}
        for x, y in pairs:
            neighbors.setdefault(x, set()).add(y)
            neighbors.setdefault(y, set()).add(x)
        remap = np.arange(n_labels)
        changed = False
        for s in small:
            cands = [c for c in neighbors.get(int(s), ()) if sizes[c] >= min_segment_px]
            if not cands:
                cands = [c for c in neighbors.get(int(s), ())]
            if not cands:
                continue
            best = min(cands, key=lambda c: abs(means[c] - means[s]))
            remap[s] = best
            changed = True
        if not changed:
            break
        # resolve chains
        for _ in range(4):
            remap = remap[remap]
        labels = remap[labels]
    # compact label ids
    uniq, compact = np.unique(labels, return_inverse=True)
    return compact.reshape(labels.shape), len(uniq)


# --------------------------------------------------------------------------
# fast marching distance map (||grad T|| = 1)
# --------------------------------------------------------------------------

def fast_marching_distance(known_mask: np.ndarray) -> DistanceMap:
    """Upwind quadratic Eikonal solve from the known region outward."""
    known = np.asarray(known_mask, dtype=bool)
    h, w = known.shape
    T = np.where(known, 0.0, INF)
    state = np.where(known, KNOWN, UNKNOWN).astype(np.uint8)

    def eikonal_update(y, x):
        tx = min(
            T[y, x - 1] if x > 0 and state[y, x - 1] == KNOWN else INF,
            T[y, x + 1] if x < w - 1 and state[y, x + 1] == KNOWN else INF,
        )
        ty = min(
            T[y - 1, x] if y > 0 and state[y - 1, x] == KNOWN else INF,
            T[y + 1, x] if y < h - 1 and state[y + 1, x] == KNOWN else INF,
        )
        a, b = (tx, ty) if tx <= ty else (ty, tx)
        if np.isinf(a):
            return INF
        if np.isinf(b) or b - a >= 1.0:
            return a + 1.0
        return 0.5 * (a + b + np.sqrt(2.0 - (a - b) ** 2))

    heap = []
    ys, xs = np.nonzero(known)
    for y, x in zip(ys.tolist(), xs.tolist()):
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and state[ny, nx] == UNKNOWN:
                t_new = eikonal_update(ny, nx)
                if t_new < T[ny, nx]:
                    T[ny, nx] = t_new
                    state[ny, nx] = BAND
                    heapq.heappush(heap, (t_new, ny, nx))

    while heap:
        t, y, x = heapq.heappop(heap)
        if state[y, x] == KNOWN or t > T[y, x]:
            continue
        state[y, x] = KNOWN
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and state[ny, nx] != KNOWN:
                t_new = eikonal_update(ny, nx)
                if t_new < T[ny, nx]:
                    T[ny, nx] = t_new
                    state[ny, nx] = BAND
                    heapq.heappush(heap, (t_new, ny, nx))

    final_state = np.where(np.asarray(known_mask, dtype=bool), KNOWN,
                           np.where(np.isfinite(T), BAND, UNKNOWN)).astype(np.uint8)
    return DistanceMap(T=T, state=final_state)


def boundary_normal(T: np.ndarray):
    """N = grad T / ||grad T|| by central differences (zero where undefined)."""
    Tf = np.where(np.isfinite(T), T, np.nanmax(np.where(np.isfinite(T), T, np.nan)) if np.isfinite(T).any() else 0.0)
    gy, gx = np.gradient(Tf)
    norm = np.hypot(gx, gy)
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(norm > 1e-12, gx / norm, 0.0)
        ny = np.where(norm > 1e-12, gy / norm, 0.0)
    return nx, ny


# --------------------------------------------------------------------------
# weights (direction, distance, level set, intensity)
# --------------------------------------------------------------------------

def compute_weight(p, q, dist: DistanceMap, image: np.ndarray,
                   dir_floor: float = 0.01) -> float:
    """Single-pair weight |w_dir * w_dst * w_lev * w_img| with intensities
    normalized to [0, 1]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = p - q
    r = np.linalg.norm(d)
    if r == 0:
        raise ValueError("p and q must differ")
    nx, ny = boundary_normal(dist.T)
    py, px = int(round(p[1])), int(round(p[0]))
    qy, qx = int(round(q[1])), int(round(q[0]))
    w_dir = (d[0] / r) * nx[py, px] + (d[1] / r) * ny[py, px]
    w_dir = np.sign(w_dir) * max(abs(w_dir), dir_floor) if w_dir != 0 else dir_floor
    w_dst = 1.0 / r**2
    w_lev = 1.0 / (1.0 + abs(dist.T[py, px] - dist.T[qy, qx]))
    di = image[py, px] - image[qy, qx]
    w_img = np.exp(-(di * di) / 2.0)
    return float(abs(w_dir * w_dst * w_lev * w_img))


# --------------------------------------------------------------------------
# the march
# --------------------------------------------------------------------------

def inpaint_depth(semi: SemiDenseDepthMap, image: np.ndarray,
                  seg: SegmentationMap, eps_radius: int = 7,
                  min_seed_fraction: float = 1e-3,
                  dir_floor: float = 0.01) -> DenseDepthMap:
    """Fill depth holes segment by segment in fast-marching priority order.

    Pixels in segments with no (or too few) seeds stay invalid; a pixel whose
    epsilon-disk holds no eligible contributor is retried once after the main
    sweep, then left invalid.
    """
    img = np.asarray(image, dtype=float)
    if img.max() > 1.0 + 1e-6:
        img = img / 255.0
    h, w = img.shape
    labels = seg.labels
    known0 = semi.valid.copy()

    depth = np.where(known0, semi.depth, 0.0)
    filled = known0.copy()
    provenance = np.zeros((h, w), dtype=np.uint8)

    # segments eligible for filling
    seg_sizes = np.bincount(labels.ravel(), minlength=seg.count)
    seed_counts = np.bincount(labels[known0].ravel(), minlength=seg.count)
    eligible_seg = seed_counts >= np.maximum(1, min_seed_fraction * seg_sizes)
    seedless = sorted(np.flatnonzero(~eligible_seg).tolist())

    dist = fast_marching_distance(known0)
    T = dist.T
    nx_map, ny_map = boundary_normal(T)

    offs = []
    for dy in range(-eps_radius, eps_radius + 1):
        for dx in range(-eps_radius, eps_radius + 1):
            r2 = dx * dx + dy * dy
            if 0 < r2 <= eps_radius * eps_radius:
                offs.append((dx, dy, np.sqrt(r2)))
    off_dx = np.array([o[0] for o in offs])
    off_dy = np.array([o[1] for o in offs])
    off_r = np.array([o[2] for o in offs])

    def try_fill(y, x):
        xs = x + off_dx
        ys = y + off_dy
        inb = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        xs, ys, rr = xs[inb], ys[inb], off_r[inb]
        ok = filled[ys, xs] & (labels[ys, xs] == labels[y, x])
        if not np.any(ok):
            return False
        xs, ys, rr = xs[ok], ys[ok], rr[ok]
        ux = (x - xs) / rr
        uy = (y - ys) / rr
        w_dir = np.abs(ux * nx_map[y, x] + uy * ny_map[y, x])
        w_dir = np.maximum(w_dir, dir_floor)
        w_dst = 1.0 / (rr * rr)
        w_lev = 1.0 / (1.0 + np.abs(T[y, x] - T[ys, xs]))
        di = img[y, x] - img[ys, xs]
        w_img = np.exp(-(di * di) / 2.0)
        wgt = np.abs(w_dir * w_dst * w_lev * w_img)
        total = wgt.sum()
        if total <= 0:
            return False
        depth[y, x] = float(np.dot(wgt, depth[ys, xs]) / total)
        filled[y, x] = True
        provenance[y, x] = 1
        return True

    # march order: strictly increasing T
    cand = np.flatnonzero(~known0.ravel() & np.isfinite(T.ravel())
                          & eligible_seg[labels.ravel()])
    order = cand[np.argsort(T.ravel()[cand], kind="stable")]
    deferred = []
    for lin in order:
        y, x = divmod(int(lin), w)
        if not try_fill(y, x):
            deferred.append((y, x))
    for y, x in deferred:
        try_fill(y, x)

    return DenseDepthMap(
        depth=np.where(filled, depth, 0.0),
        valid=filled,
        provenance=provenance,
        seedless_segments=seedless,
    )


# --------------------------------------------------------------------------
# post filters: bilateral, then non-local means, inpainted pixels only
# --------------------------------------------------------------------------

def _shift2d(arr, dy, dx, fill=0.0):
    out = np.full_like(arr, fill)
    h, w = arr.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    out[ys0:ys1, xs0:xs1] = arr[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return out


def bilateral_filter_depth(depth, valid, sigma_s: float = 3.0,
                           sigma_r_frac: float = 0.05):
    vals = depth[valid]
    if vals.size == 0:
        return depth.copy()
    drange = max(float(vals.max() - vals.min()), 1e-9)
    sigma_r = sigma_r_frac * drange
    radius = int(np.ceil(2 * sigma_s))
    acc = np.zeros_like(depth)
    wacc = np.zeros_like(depth)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            gs = np.exp(-(dx * dx + dy * dy) / (2 * sigma_s**2))
            dsh = _shift2d(depth, dy, dx)
            vsh = _shift2d(valid.astype(float), dy, dx)
            wr = np.exp(-((depth - dsh) ** 2) / (2 * sigma_r**2))
            wgt = gs * wr * vsh
            acc += wgt * dsh
            wacc += wgt
    out = np.where(wacc > 0, acc / np.maximum(wacc, 1e-12), depth)
    return np.where(valid, out, depth)


def nlm_filter_depth(depth, valid, patch: int = 5, search: int = 11,
                     h_frac: float = 0.03):
    """Non-local means with the center pixel excluded from the patch
    distance: the standard form preserves isolated spikes (the self-patch
    always wins), the impulse-robust variant averages them away."""
    vals = depth[valid]
    if vals.size == 0:
        return depth.copy()
    drange = max(float(vals.max() - vals.min()), 1e-9)
    h2 = (h_frac * drange) ** 2
    sr = search // 2
    acc = np.zeros_like(depth)
    wacc = np.zeros_like(depth)
    vmask = valid.astype(float)
    base = np.where(valid, depth, 0.0)
    n_patch = patch * patch
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            dsh = _shift2d(base, dy, dx)
            vsh = _shift2d(vmask, dy, dx)
            both = vmask * vsh
            diff2 = (base - dsh) ** 2 * both
            norm = uniform_filter(both, size=patch, mode="constant") * n_patch
            dist = uniform_filter(diff2, size=patch, mode="constant") * n_patch
            # strip the central pair from the comparison
            norm = norm - both
            dist = dist - diff2
            with np.errstate(invalid="ignore", divide="ignore"):
                dist = np.where(norm > 1e-9, dist / np.maximum(norm, 1e-9), np.inf)
            wgt = np.exp(-dist / max(h2, 1e-18)) * vsh
            acc += wgt * dsh
            wacc += wgt
    out = np.where(wacc > 0, acc / np.maximum(wacc, 1e-12), depth)
    return np.where(valid, out, depth)


def filter_depth(dense: DenseDepthMap, sigma_s: float = 3.0,
                 sigma_r_frac: float = 0.05, nlm_patch: int = 5,
                 nlm_search: int = 11, nlm_h_frac: float = 0.03) -> DenseDepthMap:
    """Bilateral then NLM smoothing applied to inpainted pixels only;
    measured pixels pass through bit-identical."""
    inpainted = dense.valid & (dense.provenance == 1)
    out = bilateral_filter_depth(dense.depth, dense.valid, sigma_s, sigma_r_frac)
    out = np.where(inpainted, out, dense.depth)
    out2 = nlm_filter_depth(out, dense.valid, nlm_patch, nlm_search, nlm_h_frac)
    out2 = np.where(inpainted, out2, dense.depth)
    return DenseDepthMap(
        depth=out2, valid=dense.valid.copy(), provenance=dense.provenance.copy(),
        seedless_segments=dense.seedless_segments,
    )


# --------------------------------------------------------------------------
# texture rendering
# --------------------------------------------------------------------------

def colorize(dense: DenseDepthMap, image: np.ndarray, rv: ReferenceView,
             camera: CameraModel, world_frame: bool = False):
    """Textured point cloud: (points (N,3), intensity (N,), pixels (N,2)).

    Points are in the RV camera frame unless ``world_frame`` is set.
    """
    img = np.asarray(image, dtype=float)
    ys, xs = np.nonzero(dense.valid)
    if len(ys) == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2))
    px = np.stack([xs.astype(float), ys.astype(float)], axis=-1)
    z = dense.depth[ys, xs]
    xn = camera.pixel_to_normalized(px)
    pts = np.column_stack([xn[:, 0] * z, xn[:, 1] * z, z])
    if world_frame:
        pts = rv.pose.act(pts)
    return pts, img[ys, xs], px
