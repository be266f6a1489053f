"""Feature front end: corner detection on time surfaces, pyramidal LK point
tracking with a forward-backward consistency gate, and multi-view
triangulation to anchored inverse depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraModel
from .direct_align import bilinear_sample
from .events import TimeSurface
from .geometry import Pose


class InsufficientBaselineError(ValueError):
    pass


class TriangulationRejected(ValueError):
    """Negative depth or reprojection gate failure."""


@dataclass
class FeatureTrack:
    id: int
    source: str                                   # "event-corner" | "image-corner"
    observations: list = field(default_factory=list)   # [(keyframe_index, (2,) pixel)]
    inverse_depth: Optional[float] = None

    def add_observation(self, kf_index: int, pixel):
        self.observations.append((kf_index, np.asarray(pixel, dtype=float).copy()))

    @property
    def anchor(self):
        return self.observations[0]

    def observation_in(self, kf_index: int):
        for idx, px in self.observations:
            if idx == kf_index:
                return px
        return None


# --------------------------------------------------------------------------
# corner detection (Shi-Tomasi minimum eigenvalue on |TS|)
# --------------------------------------------------------------------------

def corner_response(image: np.ndarray, smooth_sigma: float = 1.0,
                    window_sigma: float = 2.0) -> np.ndarray:
    img = gaussian_filter(np.asarray(image, dtype=float), smooth_sigma)
    gy, gx = np.gradient(img)
    Ixx = gaussian_filter(gx * gx, window_sigma)
    Iyy = gaussian_filter(gy * gy, window_sigma)
    Ixy = gaussian_filter(gx * gy, window_sigma)
    tr = 0.5 * (Ixx + Iyy)
    det = np.sqrt(np.maximum(0.25 * (Ixx - Iyy) ** 2 + Ixy**2, 0.0))
    return tr - det   # smaller eigenvalue of the structure tensor


def detect_corners(image: np.ndarray, existing=None, target_count: int = 100,
                   nms_radius: float = 10.0, quality: float = 0.05,
                   border: int = 5, abs_quality: float = 1e-3):
    """Up to target_count response maxima, suppressing neighborhoods of both
    accepted corners and ``existing`` points. Returns (N, 2) pixel array.

    ``abs_quality`` is an absolute response floor: a relative gate alone
    promotes aperture-limited 1-D structure whenever a view holds no true
    corner (the peak response is then itself junk).
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    resp = corner_response(image)
    h, w = resp.shape
    resp[:border, :] = 0
    resp[-border:, :] = 0
    resp[:, :border] = 0
    resp[:, -border:] = 0
    peak = float(resp.max())
    if peak <= abs_quality:
        return np.zeros((0, 2))
    threshold = max(quality * peak, abs_quality)
    ys, xs = np.nonzero(resp > threshold)
    order = np.argsort(resp[ys, xs])[::-1]
    taken = []
    blocked = [np.asarray(p, dtype=float) for p in (existing or [])]
    r2 = nms_radius**2
    for k in order:
        x, y = float(xs[k]), float(ys[k])
        ok = True
        for p in blocked:
            if (p[0] - x) ** 2 + (p[1] - y) ** 2 < r2:
                ok = False
                break
        if not ok:
            continue
        pt = np.array([x, y])
        taken.append(pt)
        blocked.append(pt)
        if len(taken) >= target_count:
            break
    return np.array(taken) if taken else np.zeros((0, 2))


def detect_event_corners(ts: TimeSurface, existing=None, target_count: int = 100,
                         nms_radius: float = 10.0, quality: float = 0.05,
                         abs_quality: float = 1e-3):
    """Corner detection on the polarity-magnitude of the time surface."""
    return detect_corners(ts.abs_values, existing, target_count, nms_radius,
                          quality, abs_quality=abs_quality)


# --------------------------------------------------------------------------
# pyramidal LK point tracking
# --------------------------------------------------------------------------

def _downsample(img):
    # anti-alias before decimation: raw 2x2 averaging leaves enough aliasing
    # to create false LK minima on fine-grained texture
    return gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _build_pyramid(img, levels):
    pyr = [np.asarray(img, dtype=float)]
    for _ in range(1, levels):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _track_single(prev_pyr, cur_pyr, pt, half_window, iterations, tol):
    levels = len(prev_pyr)
    offs = np.stack(
        np.meshgrid(np.arange(-half_window, half_window + 1),
                    np.arange(-half_window, half_window + 1)),
        axis=-1,
    ).reshape(-1, 2).astype(float)
    d = np.zeros(2)
    for level in reversed(range(levels)):
        s = 0.5**level
        base = pt * s
        prev_img = prev_pyr[level]
        cur_img = cur_pyr[level]
        win = base[None, :] + offs
        t_vals, tgx, tgy, t_ok = bilinear_sample(prev_img, win)
        if t_ok.mean() < 0.6:
            if level == 0:
                return None
            d = d * 2.0
            continue
        G = np.stack([tgx, tgy], axis=1)
        H = G[t_ok].T @ G[t_ok]
        tr = 0.5 * (H[0, 0] + H[1, 1])
        det_root = np.sqrt(max(0.25 * (H[0, 0] - H[1, 1]) ** 2 + H[0, 1] ** 2, 0.0))
        if tr - det_root < 1e-2:
            # textureless at this scale: skip rather than diverge
            if level == 0:
                return None
            d = d * 2.0
            continue
        Hinv = np.linalg.inv(H)

        def ssd_at(dd):
            c_vals, _, _, c_ok = bilinear_sample(cur_img, win + dd[None, :],
                                                 need_grad=False)
            ok = t_ok & c_ok
            if ok.mean() < 0.6:
                return None, None, None
            e = np.where(ok, c_vals - t_vals, 0.0)
            return float(np.sum(e * e)), e, ok

        d_in = d.copy()
        cost_in, _, _ = ssd_at(d)
        if cost_in is None:
            return None
        for _ in range(iterations):
            cost, e, ok = ssd_at(d)
            if cost is None:
                d = d_in
                break
            g = G[ok].T @ e[ok]
            step = -Hinv @ g
            norm = np.linalg.norm(step)
            if norm > half_window:
                step = step * (half_window / norm)
            d = d + step
            if np.linalg.norm(d - d_in) > 4.0 * half_window:
                d = d_in
                break
            if norm < tol:
                break
        cost_out, _, _ = ssd_at(d)
        if cost_out is None or cost_out > cost_in:
            # this level made things worse: keep the incoming estimate
            d = d_in
        d = d * 2.0 if level > 0 else d
    return pt + d


def _track_batch(prev_pyr, cur_pyr, points, half_window, iterations, tol,
                 min_eig: float = 1e-2, init_points=None):
    """Vectorized pyramidal LK over all points at once.

    Returns (positions (N,2), ok (N,) bool); mirrors _track_single including
    the per-level cost guard and textureless-level skip. ``init_points``
    seeds the search in the current image (anchored tracking), defaulting to
    the template positions themselves.
    """
    n = len(points)
    if n == 0:
        return points.copy(), np.zeros(0, dtype=bool)
    levels = len(prev_pyr)
    side = 2 * half_window + 1
    offs = np.stack(
        np.meshgrid(np.arange(-half_window, half_window + 1),
                    np.arange(-half_window, half_window + 1)),
        axis=-1,
    ).reshape(-1, 2).astype(float)                      # (K, 2)
    K = len(offs)
    if init_points is None:
        d = np.zeros((n, 2))
    else:
        d = (np.asarray(init_points, dtype=float) - points) * 0.5 ** (levels - 1)
    ok = np.ones(n, dtype=bool)
    for level in reversed(range(levels)):
        s = 0.5**level
        base = points * s                                # (N, 2)
        win = base[:, None, :] + offs[None, :, :]        # (N, K, 2)
        flat = win.reshape(-1, 2)
        t_vals, tgx, tgy, t_ok = bilinear_sample(prev_pyr[level], flat)
        t_vals = t_vals.reshape(n, K)
        G = np.stack([tgx, tgy], axis=1).reshape(n, K, 2)
        t_okm = t_ok.reshape(n, K)
        frac_ok = t_okm.mean(axis=1)
        Gm = np.where(t_okm[:, :, None], G, 0.0)
        H = np.einsum("nki,nkj->nij", Gm, Gm)            # (N, 2, 2)
        tr = 0.5 * (H[:, 0, 0] + H[:, 1, 1])
        det_root = np.sqrt(np.maximum(
            0.25 * (H[:, 0, 0] - H[:, 1, 1]) ** 2 + H[:, 0, 1] ** 2, 0.0))
        lam_min = tr - det_root
        usable = ok & (frac_ok >= 0.6) & (lam_min >= min_eig)
        if level == 0:
            # the finest level must be solvable; coarse levels may be skipped
            ok &= (frac_ok >= 0.6) & (lam_min >= min_eig)
        det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] * H[:, 1, 0]
        det = np.where(np.abs(det) > 1e-18, det, 1.0)
        Hinv = np.empty_like(H)
        Hinv[:, 0, 0] = H[:, 1, 1] / det
        Hinv[:, 1, 1] = H[:, 0, 0] / det
        Hinv[:, 0, 1] = -H[:, 0, 1] / det
        Hinv[:, 1, 0] = -H[:, 1, 0] / det

        def ssd(dd, active):
            c_vals, _, _, c_ok = bilinear_sample(
                cur_pyr[level], (win + dd[:, None, :]).reshape(-1, 2),
                need_grad=False)
            c_vals = c_vals.reshape(n, K)
            c_okm = c_ok.reshape(n, K) & t_okm
            cover = c_okm.mean(axis=1) >= 0.6
            e = np.where(c_okm, c_vals - t_vals, 0.0)
            return (e * e).sum(axis=1), e, c_okm, cover & active

        d_in = d.copy()
        cost_in, _, _, alive = ssd(d, usable)
        for _ in range(iterations):
            _, e, c_okm, alive_it = ssd(d, alive)
            g = np.einsum("nki,nk->ni", Gm * c_okm[:, :, None], e)
            step = -np.einsum("nij,nj->ni", Hinv, g)
            norm = np.linalg.norm(step, axis=1)
            scale = np.where(norm > half_window, half_window / np.maximum(norm, 1e-12), 1.0)
            step = step * scale[:, None] * alive_it[:, None]
            d = d + step
            runaway = np.linalg.norm(d - d_in, axis=1) > 4.0 * half_window
            d = np.where(runaway[:, None], d_in, d)
            alive = alive_it & ~runaway
            if not np.any(norm[alive_it] >= tol):
                break
        cost_out, _, _, _ = ssd(d, usable)
        worse = ~usable | (cost_out > cost_in) | ~np.isfinite(cost_out)
        d = np.where(worse[:, None], d_in, d)
        d = d * (2.0 if level > 0 else 1.0)
    return points + d, ok


def track_points(prev_img, cur_img, points, levels: int = 3, half_window: int = 5,
                 iterations: int = 15, tol: float = 0.01, fb_threshold: float = 1.0,
                 pyramids=None, min_eig: float = 1e-2, init_points=None):
    """Pyramidal LK with a forward-backward gate, batched over all points.

    Returns (positions (N,2), tracked (N,) bool); failed entries keep their
    input position with tracked=False. ``pyramids`` may carry prebuilt
    (prev_pyr, cur_pyr) to amortize construction across calls; ``init_points``
    seeds the forward search (anchored tracking against a fixed template).
    The backward pass is seeded at the template positions, so the
    forward-backward gate stays meaningful for large seeded displacements.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        return points.copy(), np.zeros(0, dtype=bool)
    if pyramids is not None:
        prev_pyr, cur_pyr = pyramids
    else:
        prev_pyr = _build_pyramid(prev_img, levels)
        cur_pyr = _build_pyramid(cur_img, levels)
    h, w = prev_pyr[0].shape
    fwd, ok_f = _track_batch(prev_pyr, cur_pyr, points, half_window, iterations, tol,
                             min_eig=min_eig, init_points=init_points)
    in_b = (fwd[:, 0] >= 0) & (fwd[:, 0] <= w - 1) & (fwd[:, 1] >= 0) & (fwd[:, 1] <= h - 1)
    cand = ok_f & in_b
    back, ok_b = _track_batch(cur_pyr, prev_pyr, np.where(cand[:, None], fwd, points),
                              half_window, iterations, tol, min_eig=min_eig,
                              init_points=points)
    fb_err = np.linalg.norm(back - points, axis=1)
    tracked = cand & ok_b & (fb_err <= fb_threshold)
    out = np.where(tracked[:, None], fwd, points)
    return out, tracked


def track_features(ts_prev: TimeSurface, ts_cur: TimeSurface, features, **kw):
    """Track event-corner features between time surfaces (on |TS|)."""
    if ts_prev.values.shape != ts_cur.values.shape:
        raise ValueError("time surfaces must share a resolution")
    return track_points(ts_prev.abs_values, ts_cur.abs_values, features, **kw)


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------

def triangulate(track: FeatureTrack, poses: dict, camera: CameraModel,
                extrinsic: Pose = None, min_baseline: float = 0.02,
                max_reprojection_px: float = 3.0) -> float:
    """Inverse depth in the anchor event frame from >= 2 observations via DLT.

    ``poses`` maps keyframe index -> body pose T_w_b. Raises
    InsufficientBaselineError / TriangulationRejected per the gate that fails.
    """
    extrinsic = extrinsic or Pose.identity()
    obs = [(idx, px) for idx, px in track.observations if idx in poses]
    if len(obs) < 2:
        raise InsufficientBaselineError("need at least two posed observations")
    cam_poses = [poses[idx] @ extrinsic for idx, _ in obs]
    centers = np.array([T.t for T in cam_poses])
    baseline = max(
        np.linalg.norm(centers[i] - centers[j])
        for i in range(len(centers))
        for j in range(i + 1, len(centers))
    )
    if baseline < min_baseline:
        raise InsufficientBaselineError(f"baseline {baseline:.4f} m below minimum")

    A = []
    for (idx, px), T_we in zip(obs, cam_poses):
        xn = camera.pixel_to_normalized(px)
        R = T_we.R.T            # world -> camera rows
        t = -R @ T_we.t
        P = np.hstack([R, t[:, None]])
        A.append(xn[0] * P[2] - P[0])
        A.append(xn[1] * P[2] - P[1])
    A = np.asarray(A)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise TriangulationRejected("point at infinity")
    X = Xh[:3] / Xh[3]

    # every observing view must see it in front and close to its measurement
    for (idx, px), T_we in zip(obs, cam_poses):
        Xc = T_we.inverse().act(X)
        if Xc[2] <= 0:
            raise TriangulationRejected("point behind a camera")
        err = np.linalg.norm(camera.project(Xc) - px)
        if err > max_reprojection_px:
            raise TriangulationRejected(f"reprojection error {err:.2f} px")

    anchor_cam = cam_poses[0]
    Xa = anchor_cam.inverse().act(X)
    return float(1.0 / Xa[2])
