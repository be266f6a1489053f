"""Event-based space-sweep semi-dense depth.

Every event defines a ray from its camera center; the ray is intersected
with N depth planes anchored at a reference view (RV) and votes are
splatted bilinearly into a w x h x N grid (the DSI). Depth is read out at
3D local maxima of the vote density.

Plane transfer uses the closed form for normalized coordinates

    x(Zi) = [Z0 (Zi - Zc)] / [Zi (Z0 - Zc)] * x(Z0)
          + (1/Zi) * (1 - (Zi - Zc)/(Z0 - Zc)) * Xc

which is the ray-plane intersection through the per-event optical center
(Xc, Yc, Zc) expressed in the RV frame, and is algebraically identical to
chaining the plane homographies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import maximum_filter

from .camera import CameraModel
from .events import EventStream
from .geometry import Pose, PoseBuffer, so3_log


class PlaneSingularityError(ValueError):
    pass


@dataclass
class ReferenceView:
    pose: Pose                 # event-camera pose in the world, T_w_rv
    t: float
    image: Optional[object] = None   # IntensityImage captured at the RV


@dataclass
class Dsi:
    votes: np.ndarray          # (h, w, N)
    depths: np.ndarray         # (N,) strictly increasing
    rv: ReferenceView
    accepted_events: int = 0
    skipped_events: int = 0
    clipped_votes: float = 0.0


@dataclass
class SemiDenseDepthMap:
    depth: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray


def inverse_depth_planes(near: float = 0.5, far: float = 10.0, n: int = 100):
    """Plane depths sampled uniformly in inverse depth, increasing."""
    if not (0 < near < far):
        raise ValueError("need 0 < near < far")
    inv = np.linspace(1.0 / near, 1.0 / far, n)
    return 1.0 / inv


def new_dsi(camera: CameraModel, rv: ReferenceView, near=0.5, far=10.0, n=100) -> Dsi:
    depths = inverse_depth_planes(near, far, n)
    votes = np.zeros((camera.height, camera.width, n), dtype=np.float64)
    return Dsi(votes=votes, depths=depths, rv=rv)


# --------------------------------------------------------------------------
# RV selection
# --------------------------------------------------------------------------

def select_reference_view(pose_stream, last_rv: Optional[ReferenceView],
                          translation_threshold: float = 0.05,
                          rotation_threshold: float = np.deg2rad(5.0),
                          frames=None) -> Optional[ReferenceView]:
    """First pose in the stream whose motion from last_rv exceeds either
    threshold (or the first pose when last_rv is None).

    ``pose_stream`` yields (t, Pose) in time order; ``frames`` is an optional
    list of (t, image) from which the nearest image is attached.
    """
    def attach(rv):
        if frames:
            ts = np.array([t for t, _ in frames])
            k = int(np.argmin(np.abs(ts - rv.t)))
            rv.image = frames[k][1]
        return rv

    for t, pose in pose_stream:
        if last_rv is None:
            return attach(ReferenceView(pose=pose, t=t))
        if t <= last_rv.t:
            continue
        rel = last_rv.pose.inverse() @ pose
        if (np.linalg.norm(rel.t) > translation_threshold
                or np.linalg.norm(so3_log(rel.R)) > rotation_threshold):
            return attach(ReferenceView(pose=pose, t=t))
    return None


# --------------------------------------------------------------------------
# homographies and plane transfer
# --------------------------------------------------------------------------

def canonical_homography(T_cur_rv: Pose, Z0: float):
    """(H, H_inv) with H_inv = R + t e3^T / Z0 mapping canonical-plane
    normalized coordinates to the current camera."""
    if Z0 <= 0:
        raise ValueError("Z0 must be positive")
    R = T_cur_rv.R
    t = T_cur_rv.t
    H_inv = R + np.outer(t, np.array([0.0, 0.0, 1.0])) / Z0
    det = np.linalg.det(H_inv)
    if abs(det) < 1e-12:
        raise PlaneSingularityError("camera center lies in the canonical plane")
    return np.linalg.inv(H_inv), H_inv


def transfer_across_planes(x_z0, Z0, Zi, optical_center):
    """Closed-form move of canonical-plane points to plane(s) Zi.

    x_z0: (..., 2) normalized coordinates on Z=Z0; Zi scalar or (M,);
    optical_center: the event camera center in the RV frame.
    """
    x_z0 = np.asarray(x_z0, dtype=float)
    Zi = np.asarray(Zi, dtype=float)
    Xc, Yc, Zc = np.asarray(optical_center, dtype=float)
    if abs(Z0 - Zc) < 1e-12:
        raise PlaneSingularityError("optical center lies in the canonical plane")
    if np.any(Zi <= 0):
        raise ValueError("target planes must have positive depth")
    A = (Z0 * (Zi - Zc)) / (Zi * (Z0 - Zc))
    B = (1.0 / Zi) * (1.0 - (Zi - Zc) / (Z0 - Zc))
    if Zi.ndim == 0:
        return A * x_z0 + B * np.array([Xc, Yc])
    out = A[..., :, None] * x_z0[..., None, :2]
    out = out + B[..., :, None] * np.array([Xc, Yc])[None, :]
    return out


# --------------------------------------------------------------------------
# voting
# --------------------------------------------------------------------------

def back_project_events(dsi: Dsi, events: EventStream, poses: PoseBuffer,
                        camera: CameraModel, chunk: int = 6000) -> Dsi:
    """Splat every event's per-plane ray intersections into the DSI.

    Each event contributes exactly one vote per plane, split bilinearly over
    the 4 nearest voxels; votes falling outside the grid are counted as
    clipped. Events without a bracketing pose are skipped and counted.
    """
    h, w, n_planes = dsi.votes.shape
    Z0 = float(dsi.depths[0])
    depths = dsi.depths
    T_rv_w = dsi.rv.pose.inverse()

    t_all = events.t
    t_lo, t_hi = poses.times[0], poses.times[-1]
    in_cover = (t_all >= t_lo - 1e-9) & (t_all <= t_hi + 1e-9)
    dsi.skipped_events += int(np.count_nonzero(~in_cover))

    idx_all = np.flatnonzero(in_cover)
    flat_plane_votes = dsi.votes.reshape(-1)
    for s in range(0, len(idx_all), chunk):
        sel = idx_all[s : s + chunk]
        m = len(sel)
        if m == 0:
            continue
        R_cur, t_cur = poses.rotations_translations_at(t_all[sel])
        # T_cur_rv = (T_w_cur)^-1 . T_w_rv
        R_rv = dsi.rv.pose.R
        t_rv = dsi.rv.pose.t
        R_rel = np.einsum("nij,jk->nik", R_cur.transpose(0, 2, 1), R_rv)
        t_rel = np.einsum("nij,nj->ni", R_cur.transpose(0, 2, 1), t_rv[None, :] - t_cur)

        # canonical-plane coordinates via H_{Z0}: solve H_inv @ x_c = uv1
        px = np.stack([events.u[sel], events.v[sel]], axis=-1).astype(float)
        xn = camera.pixel_to_normalized(px)
        uv1 = np.concatenate([xn, np.ones((m, 1))], axis=1)
        H_inv = R_rel + t_rel[:, :, None] * np.array([0.0, 0.0, 1.0])[None, None, :] / Z0
        try:
            xc_h = np.linalg.solve(H_inv, uv1[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            dsi.skipped_events += m
            continue
        bad = np.abs(xc_h[:, 2]) < 1e-12
        x_z0 = np.empty((m, 2))
        x_z0[~bad] = xc_h[~bad, :2] / xc_h[~bad, 2:3]
        # optical centers in the RV frame
        centers = -np.einsum("nji,nj->ni", R_rel, t_rel)
        sing = bad | (np.abs(Z0 - centers[:, 2]) < 1e-9)
        if np.any(sing):
            dsi.skipped_events += int(np.count_nonzero(sing))
        keep = ~sing
        if not np.any(keep):
            continue
        x_z0 = x_z0[keep]
        centers = centers[keep]
        mk = len(x_z0)
        dsi.accepted_events += mk

        Zc = centers[:, 2:3]
        A = (Z0 * (depths[None, :] - Zc)) / (depths[None, :] * (Z0 - Zc))
        B = (1.0 - (depths[None, :] - Zc) / (Z0 - Zc)) / depths[None, :]
        px_x = camera.fx * (A * x_z0[:, 0:1] + B * centers[:, 0:1]) + camera.cx
        px_y = camera.fy * (A * x_z0[:, 1:2] + B * centers[:, 1:2]) + camera.cy

        x0 = np.floor(px_x).astype(np.int64)
        y0 = np.floor(px_y).astype(np.int64)
        fx = px_x - x0
        fy = px_y - y0
        plane_idx = np.broadcast_to(np.arange(n_planes)[None, :], (mk, n_planes))
        for dx, dy, wgt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xx = x0 + dx
            yy = y0 + dy
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            dsi.clipped_votes += float(np.sum(wgt[~inside]))
            lin = (yy * w + xx) * n_planes + plane_idx
            flat_plane_votes += np.bincount(
                lin[inside].ravel(), weights=wgt[inside].ravel(),
                minlength=flat_plane_votes.size,
            )
    return dsi


def ray_voxel_oracle_votes(event_pixel, T_cur_rv: Pose, camera: CameraModel,
                           depths):
    """Independent per-event reference: explicit 3D ray-plane intersections
    in the RV frame, no homography algebra. Returns per-plane RV pixels."""
    xn = camera.pixel_to_normalized(np.asarray(event_pixel, dtype=float))
    d_cur = np.array([xn[0], xn[1], 1.0])
    T_rv_cur = T_cur_rv.inverse()
    origin = T_rv_cur.t
    direction = T_rv_cur.R @ d_cur
    out = []
    for Z in depths:
        if abs(direction[2]) < 1e-15:
            out.append((np.nan, np.nan))
            continue
        tau = (Z - origin[2]) / direction[2]
        p = origin + tau * direction
        out.append((camera.fx * p[0] / Z + camera.cx, camera.fy * p[1] / Z + camera.cy))
    return np.array(out)


# --------------------------------------------------------------------------
# semi-dense extraction
# --------------------------------------------------------------------------

def extract_semi_dense(dsi: Dsi, min_votes: float = 3.0, nms_radius: int = 1,
                       ratio: float = 2.0) -> SemiDenseDepthMap:
    """Depth at pixels whose best vote column peak is a 3D local maximum,
    refined by parabolic interpolation across the neighboring planes."""
    votes = dsi.votes
    h, w, n = votes.shape
    k_best = np.argmax(votes, axis=2)
    iy, ix = np.mgrid[0:h, 0:w]
    v_best = votes[iy, ix, k_best]
    col_mean = votes.mean(axis=2)

    size = 2 * int(nms_radius) + 1
    local_max = maximum_filter(votes, size=size, mode="constant")
    is_peak = votes[iy, ix, k_best] >= local_max[iy, ix, k_best] - 1e-12
    # a clamped peak on the first/last plane has no depth neighbor on one
    # side and is not a genuine local maximum of the sweep
    interior_plane = (k_best > 0) & (k_best < n - 1)

    valid = ((v_best >= min_votes)
             & (v_best >= ratio * np.maximum(col_mean, 1e-12))
             & is_peak & interior_plane)

    inv = 1.0 / dsi.depths
    k = k_best.astype(float)
    refined_inv = inv[k_best].copy()
    interior = (k_best > 0) & (k_best < n - 1) & valid
    km = np.clip(k_best - 1, 0, n - 1)
    kp = np.clip(k_best + 1, 0, n - 1)
    vm = votes[iy, ix, km]
    vp = votes[iy, ix, kp]
    denom = vm - 2.0 * v_best + vp
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = 0.5 * (vm - vp) / denom
    delta = np.clip(np.where(np.isfinite(delta), delta, 0.0), -1.0, 1.0)
    # interpolate in inverse depth between neighboring planes
    step_m = inv[k_best] - inv[km]
    step_p = inv[kp] - inv[k_best]
    adj = np.where(delta >= 0, delta * step_p, delta * step_m)
    refined_inv = np.where(interior, inv[k_best] + adj, refined_inv)

    depth = np.where(valid, 1.0 / np.maximum(refined_inv, 1e-12), 0.0)
    depth = np.where(valid, np.clip(depth, dsi.depths[0], dsi.depths[-1]), 0.0)
    return SemiDenseDepthMap(depth=depth, valid=valid, confidence=np.where(valid, v_best, 0.0))
