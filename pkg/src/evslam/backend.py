"""Sliding-window hybrid optimizer.

Fuses four residual families over up to K keyframe states
[p, q, v, bg, ba] plus anchored inverse depths:

  * IMU preintegration between consecutive keyframes,
  * image-feature and event-feature reprojection (anchored inverse depth),
  * relative-pose factors from event-mat direct alignment,
  * a quadratic marginalization prior.

All factors are whitened and stacked into one sparse Jacobian; damped
Gauss-Newton accepts steps only when the total cost decreases, so the cost
is non-increasing across accepted iterations and runs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .camera import CameraModel
from .direct_align import relative_pose_jacobians
from .frontend import FeatureTrack
from .geometry import Pose, quat_to_matrix, so3_log
from .imu import GRAVITY_W, ImuPreintegration, NavState

KF_DIM = 15   # [dp, dtheta, dv, dbg, dba]


@dataclass
class Keyframe:
    index: int
    state: NavState

    @property
    def t(self):
        return self.state.t


@dataclass
class RelativePoseFactor:
    i: int                      # keyframe index (reference)
    k: int                      # keyframe index (current)
    delta_T: Pose
    information: np.ndarray     # 6x6 PSD


@dataclass
class MarginalPrior:
    """Quadratic prior 0.5 d^T H d - b^T d on deviations from lin states."""

    keys: list                              # ordered keyframe indices
    H: np.ndarray
    b: np.ndarray
    lin_states: dict                        # index -> NavState at linearization

    def deviation(self, window: "SlidingWindow") -> np.ndarray:
        parts = []
        for key in self.keys:
            kf = window.keyframe(key)
            lin = self.lin_states[key]
            R_lin = lin.R
            parts.append(np.concatenate([
                kf.state.p - lin.p,
                so3_log(R_lin.T @ kf.state.R),
                kf.state.v - lin.v,
                kf.state.bg - lin.bg,
                kf.state.ba - lin.ba,
            ]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, window: "SlidingWindow") -> float:
        d = self.deviation(window)
        return float(0.5 * d @ self.H @ d - self.b @ d)


@dataclass
class WindowOptions:
    max_keyframes: int = 10
    max_iterations: int = 12
    huber_delta_px: float = 1.0
    event_sigma_px: float = 1.5
    image_sigma_px: float = 1.5
    bias_gyro_walk: float = 1e-4
    bias_accel_walk: float = 1e-3
    bias_prior_gyro: float = 5e-3       # absolute per-keyframe pull toward zero
    bias_prior_accel: float = 5e-2
    damping_init: float = 1e-6
    damping_up: float = 10.0
    damping_down: float = 0.1
    step_tolerance: float = 1e-10
    min_inverse_depth: float = 1e-4
    use_relative_pose: bool = True
    use_imu: bool = True
    use_features: bool = True
    marginalize_relative_pose: bool = False   # fold rel factors into the prior
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_W.copy())


class SlidingWindow:
    """K keyframe states, feature tracks, IMU factors, relative-pose factors,
    and the marginalization prior."""

    def __init__(self, opts: WindowOptions = None):
        self.opts = opts or WindowOptions()
        self.keyframes: list[Keyframe] = []
        self.tracks: dict[int, FeatureTrack] = {}
        self.imu_factors: list[tuple[int, int, ImuPreintegration]] = []
        self.rel_factors: list[RelativePoseFactor] = []
        self.prior: Optional[MarginalPrior] = None
        self.failed: bool = False
        self.cost_trace: list = []

    # -- structure ---------------------------------------------------------

    def keyframe(self, index: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.index == index:
                return kf
        raise KeyError(f"keyframe {index} not in window")

    def has_keyframe(self, index: int) -> bool:
        return any(kf.index == index for kf in self.keyframes)

    @property
    def size(self) -> int:
        return len(self.keyframes)

    @property
    def full(self) -> bool:
        return self.size >= self.opts.max_keyframes

    def add_keyframe(self, kf: Keyframe, preintegration: ImuPreintegration = None):
        if self.has_keyframe(kf.index):
            raise ValueError(f"duplicate keyframe index {kf.index}")
        if self.keyframes and preintegration is not None:
            self.imu_factors.append((self.keyframes[-1].index, kf.index, preintegration))
        self.keyframes.append(kf)

    def add_track(self, track: FeatureTrack):
        self.tracks[track.id] = track

    def add_relative_pose_factor(self, factor: RelativePoseFactor):
        self.rel_factors.append(factor)

    def set_gauge_prior(self, index: int, pose_weight: float = 1e8,
                        velocity_weight: float = 1e6, bias_weight: float = 1e6):
        """Anchor a keyframe at its current state (bootstrap gauge fixing)."""
        kf = self.keyframe(index)
        H = np.diag(
            [pose_weight] * 6 + [velocity_weight] * 3 + [bias_weight] * 6
        ).astype(float)
        self.prior = MarginalPrior(
            keys=[index], H=H, b=np.zeros(KF_DIM), lin_states={index: kf.state.copy()}
        )

    def poses(self) -> dict:
        return {kf.index: kf.state.pose() for kf in self.keyframes}

    # -- variable indexing ---------------------------------------------------

    def _variable_layout(self):
        kf_offset = {kf.index: i * KF_DIM for i, kf in enumerate(self.keyframes)}
        n = len(self.keyframes) * KF_DIM
        lm_offset = {}
        in_window = set(kf_offset)
        for tid in sorted(self.tracks):
            tr = self.tracks[tid]
            if tr.inverse_depth is None:
                continue
            obs = [o for o in tr.observations if o[0] in in_window]
            if len(obs) >= 2 and obs[0][0] == tr.anchor[0]:
                lm_offset[tid] = n
                n += 1
        return kf_offset, lm_offset, n


# --------------------------------------------------------------------------
# Eq.-8-style anchored reprojection residual
# --------------------------------------------------------------------------

def event_reprojection_residual(track: FeatureTrack, i: int, k: int,
                                window: SlidingWindow, camera: CameraModel,
                                extrinsic: Pose):
    """Observed pixel minus the anchored-inverse-depth reprojection, or None
    when the transformed point lands behind the camera."""
    if track.inverse_depth is None:
        raise ValueError("track is not triangulated")
    if i == k:
        raise ValueError("anchor and observation keyframes must differ")
    px_i = track.observation_in(i)
    px_k = track.observation_in(k)
    si = window.keyframe(i).state
    sk = window.keyframe(k).state
    r, _ = _reprojection_residual_states(
        px_i, px_k, track.inverse_depth, si, sk, camera, extrinsic
    )
    return r


def _reprojection_residual_states(px_i, px_k, lam, si: NavState, sk: NavState,
                                  camera: CameraModel, extrinsic: Pose):
    h = np.append(camera.pixel_to_normalized(np.asarray(px_i, dtype=float)), 1.0)
    X_e0 = h / lam
    X_bi = extrinsic.act(X_e0)
    X_w = si.R @ X_bi + si.p
    X_bk = sk.R.T @ (X_w - sk.p)
    X_ek = extrinsic.R.T @ (X_bk - extrinsic.t)
    if X_ek[2] <= 1e-9:
        return None, None
    r = np.asarray(px_k, dtype=float) - camera.project(X_ek)
    return r, (h, X_e0, X_bi, X_w, X_bk, X_ek)


def reprojection_jacobians(px_i, px_k, lam, si: NavState, sk: NavState,
                           camera: CameraModel, extrinsic: Pose):
    """(residual, J_i (2x15), J_k (2x15), J_lam (2x1)) or (None, ...) when the
    point falls behind the observing camera."""
    r, chain = _reprojection_residual_states(px_i, px_k, lam, si, sk, camera, extrinsic)
    if r is None:
        return None, None, None, None
    h, X_e0, X_bi, X_w, X_bk, X_ek = chain
    from .geometry import skew

    Ri = si.R
    Rk = sk.R
    R_be = extrinsic.R
    x, y, z = X_ek
    P = np.array([
        [camera.fx / z, 0.0, -camera.fx * x / z**2],
        [0.0, camera.fy / z, -camera.fy * y / z**2],
    ])
    E = P @ R_be.T   # through the final extrinsic rotation

    J_i = np.zeros((2, KF_DIM))
    J_k = np.zeros((2, KF_DIM))
    dBk_dpi = Rk.T
    dBk_dthi = -Rk.T @ Ri @ skew(X_bi)
    dBk_dpk = -Rk.T
    dBk_dthk = skew(X_bk)
    dBk_dlam = Rk.T @ Ri @ R_be @ (-X_e0 / lam)
    J_i[:, 0:3] = -E @ dBk_dpi
    J_i[:, 3:6] = -E @ dBk_dthi
    J_k[:, 0:3] = -E @ dBk_dpk
    J_k[:, 3:6] = -E @ dBk_dthk
    J_lam = (-E @ dBk_dlam).reshape(2, 1)
    return r, J_i, J_k, J_lam


# --------------------------------------------------------------------------
# whitening helpers
# --------------------------------------------------------------------------

def _sqrt_information(W: np.ndarray) -> np.ndarray:
    """Upper-triangular-ish S with S^T S = W, tolerant of PSD rank deficiency."""
    W = 0.5 * (W + W.T)
    try:
        return np.linalg.cholesky(W).T
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(W)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T


def _huber_weight(r_white: np.ndarray, delta: float) -> float:
    n = np.linalg.norm(r_white)
    if n <= delta or n == 0.0:
        return 1.0
    return float(np.sqrt(delta * (2.0 * n - delta)) / n)


# --------------------------------------------------------------------------
# batched reprojection family
# --------------------------------------------------------------------------

def _batch_skew(v):
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


class _ReprojBatch:
    """All reprojection factors flattened into arrays once per window shape;
    residuals/Jacobians evaluate with batched einsums at the current states."""

    def __init__(self, window, lm_offset, kf_offset, camera, extrinsic, opts):
        a_idx, k_idx, lam_ids = [], [], []
        px_a, px_k, sig = [], [], []
        for tid, off in lm_offset.items():
            tr = window.tracks[tid]
            sigma = (opts.event_sigma_px if tr.source == "event-corner"
                     else opts.image_sigma_px)
            anchor_idx, pa = tr.anchor
            for kk, pk in tr.observations[1:]:
                if kk not in kf_offset or anchor_idx not in kf_offset:
                    continue
                a_idx.append(anchor_idx)
                k_idx.append(kk)
                lam_ids.append(tid)
                px_a.append(pa)
                px_k.append(pk)
                sig.append(sigma)
        self.n = len(a_idx)
        self.camera = camera
        self.extrinsic = extrinsic
        self.opts = opts
        if self.n == 0:
            return
        self.a_idx = np.array(a_idx)
        self.k_idx = np.array(k_idx)
        self.lam_ids = list(lam_ids)
        self.px_a = np.asarray(px_a, dtype=float)
        self.px_k = np.asarray(px_k, dtype=float)
        self.sigma = np.asarray(sig, dtype=float)
        xn = camera.pixel_to_normalized(self.px_a)
        self.h = np.concatenate([xn, np.ones((self.n, 1))], axis=1)
        self.a_off = np.array([kf_offset[i] for i in a_idx])
        self.k_off = np.array([kf_offset[i] for i in k_idx])
        self.lm_off = np.array([lm_offset[t] for t in lam_ids])

    def _chain(self, window):
        """Current-state geometry for every factor; returns None when empty."""
        kf_order = {kf.index: j for j, kf in enumerate(window.keyframes)}
        R_all = np.stack([kf.state.R for kf in window.keyframes])
        p_all = np.stack([kf.state.p for kf in window.keyframes])
        ai = np.array([kf_order[i] for i in self.a_idx])
        ki = np.array([kf_order[i] for i in self.k_idx])
        lam = np.array([window.tracks[t].inverse_depth for t in self.lam_ids])
        R_be = self.extrinsic.R
        t_be = self.extrinsic.t
        X_e0 = self.h / lam[:, None]
        X_bi = X_e0 @ R_be.T + t_be
        Ri = R_all[ai]
        Rk = R_all[ki]
        X_w = np.einsum("nij,nj->ni", Ri, X_bi) + p_all[ai]
        X_bk = np.einsum("nji,nj->ni", Rk, X_w - p_all[ki])
        X_ek = (X_bk - t_be) @ R_be
        return lam, X_e0, X_bi, X_bk, X_ek, Ri, Rk

    def residuals(self, window):
        """(whitened residuals (N,2), scale (N,), valid (N,))."""
        if self.n == 0:
            return np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=bool)
        lam, X_e0, X_bi, X_bk, X_ek, Ri, Rk = self._chain(window)
        z = X_ek[:, 2]
        valid = z > 1e-9
        zs = np.where(valid, z, 1.0)
        u = self.camera.fx * X_ek[:, 0] / zs + self.camera.cx
        v = self.camera.fy * X_ek[:, 1] / zs + self.camera.cy
        if self.camera.has_distortion:
            xn = np.stack([X_ek[:, 0] / zs, X_ek[:, 1] / zs], axis=-1)
            uv = self.camera.normalized_to_pixel(xn)
            u, v = uv[:, 0], uv[:, 1]
        r = self.px_k - np.stack([u, v], axis=-1)
        r_w = r / self.sigma[:, None]
        norm = np.linalg.norm(r_w, axis=1)
        delta = self.opts.huber_delta_px / self.sigma
        hub = np.where(norm > delta,
                       np.sqrt(delta * np.maximum(2.0 * norm - delta, 0.0))
                       / np.maximum(norm, 1e-12),
                       1.0)
        scale = hub / self.sigma
        r_out = r * scale[:, None]
        return np.where(valid[:, None], r_out, 0.0), scale, valid

    def jacobians(self, window):
        """Whitened (r, Ji (N,2,6), Jk (N,2,6), Jlam (N,2,1), valid)."""
        if self.n == 0:
            z2 = np.zeros((0, 2))
            return z2, np.zeros((0, 2, 6)), np.zeros((0, 2, 6)), np.zeros((0, 2, 1)), np.zeros(0, dtype=bool)
        lam, X_e0, X_bi, X_bk, X_ek, Ri, Rk = self._chain(window)
        r_w, scale, valid = self.residuals(window)
        cam = self.camera
        z = np.where(valid, X_ek[:, 2], 1.0)
        P = np.zeros((self.n, 2, 3))
        P[:, 0, 0] = cam.fx / z
        P[:, 0, 2] = -cam.fx * X_ek[:, 0] / z**2
        P[:, 1, 1] = cam.fy / z
        P[:, 1, 2] = -cam.fy * X_ek[:, 1] / z**2
        E = np.einsum("nij,kj->nik", P, self.extrinsic.R)       # P @ R_be^T
        RkT = Rk.transpose(0, 2, 1)
        dpi = RkT
        dthi = -np.einsum("nij,njk,nkl->nil", RkT, Ri, _batch_skew(X_bi))
        dpk = -RkT
        dthk = _batch_skew(X_bk)
        dlam = -np.einsum("nij,njk,nk->ni", RkT, Ri, X_e0 @ self.extrinsic.R.T) / lam[:, None]
        Ji = np.concatenate([
            -np.einsum("nij,njk->nik", E, dpi),
            -np.einsum("nij,njk->nik", E, dthi),
        ], axis=2)
        Jk = np.concatenate([
            -np.einsum("nij,njk->nik", E, dpk),
            -np.einsum("nij,njk->nik", E, dthk),
        ], axis=2)
        Jlam = -np.einsum("nij,nj->ni", E, dlam)[:, :, None]
        s = (scale * valid)[:, None, None]
        return r_w * valid[:, None], Ji * s, Jk * s, Jlam * s, valid


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

class _Stacker:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []
        self.res = []
        self.row0 = 0

    def add(self, r_white, blocks):
        """blocks: list of (col_offset, J_white 2D)."""
        m = len(r_white)
        for col0, J in blocks:
            jj, kk = np.nonzero(np.ones_like(J, dtype=bool))
            self.rows.append(self.row0 + jj)
            self.cols.append(col0 + kk)
            self.vals.append(J[jj, kk])
        self.res.append(r_white)
        self.row0 += m

    def build(self, n_cols):
        if not self.res:
            return sp.csr_matrix((0, n_cols)), np.zeros(0)
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        J = sp.coo_matrix((vals, (rows, cols)), shape=(self.row0, n_cols)).tocsr()
        return J, np.concatenate(self.res)


def _assemble(window: SlidingWindow, camera: CameraModel, extrinsic: Pose,
              opts: WindowOptions, kf_offset, lm_offset, n_vars,
              batch: "_ReprojBatch" = None):
    """Whitened sparse Jacobian, residual stack, and the prior contribution."""
    st = _Stacker()
    states = {kf.index: kf.state for kf in window.keyframes}

    reproj_triplets = None
    if opts.use_features:
        if batch is None:
            batch = _ReprojBatch(window, lm_offset, kf_offset, camera, extrinsic, opts)
        if batch.n:
            r_w, Ji, Jk, Jlam, valid = batch.jacobians(window)
            N = batch.n
            row_pose = (np.arange(N)[:, None, None] * 2
                        + np.arange(2)[None, :, None]) * np.ones((1, 1, 6), dtype=int)
            cols_i = (batch.a_off[:, None, None]
                      + np.arange(6)[None, None, :]) * np.ones((1, 2, 1), dtype=int)
            cols_k = (batch.k_off[:, None, None]
                      + np.arange(6)[None, None, :]) * np.ones((1, 2, 1), dtype=int)
            row_lam = (np.arange(N)[:, None, None] * 2
                       + np.arange(2)[None, :, None]) * np.ones((1, 1, 1), dtype=int)
            cols_lam = batch.lm_off[:, None, None] * np.ones((1, 2, 1), dtype=int)
            rows = np.concatenate([row_pose.ravel(), row_pose.ravel(), row_lam.ravel()])
            cols = np.concatenate([cols_i.ravel(), cols_k.ravel(), cols_lam.ravel()])
            vals = np.concatenate([Ji.ravel(), Jk.ravel(), Jlam.ravel()])
            reproj_triplets = (rows, cols, vals, r_w.ravel())
            st.row0 = 2 * N

    if opts.use_imu:
        for i_idx, j_idx, pre in window.imu_factors:
            if i_idx not in states or j_idx not in states:
                continue
            r, Ji, Jj = pre.residual_jacobians(states[i_idx], states[j_idx], opts.gravity)
            S = _sqrt_information(pre.information())
            st.add(S @ r, [(kf_offset[i_idx], S @ Ji), (kf_offset[j_idx], S @ Jj)])
        # bias random walk between consecutive keyframes
        for i_idx, j_idx, pre in window.imu_factors:
            if i_idx not in states or j_idx not in states:
                continue
            dt = max(pre.dt_total, 1e-6)
            si, sj = states[i_idx], states[j_idx]
            r = np.concatenate([sj.bg - si.bg, sj.ba - si.ba])
            w = np.array([1.0 / (opts.bias_gyro_walk * np.sqrt(dt))] * 3
                         + [1.0 / (opts.bias_accel_walk * np.sqrt(dt))] * 3)
            Ji = np.zeros((6, KF_DIM))
            Jj = np.zeros((6, KF_DIM))
            Ji[0:3, 9:12] = -np.eye(3)
            Ji[3:6, 12:15] = -np.eye(3)
            Jj[0:3, 9:12] = np.eye(3)
            Jj[3:6, 12:15] = np.eye(3)
            st.add(r * w, [(kf_offset[i_idx], Ji * w[:, None]),
                           (kf_offset[j_idx], Jj * w[:, None])])
        # weak absolute pull of biases toward zero: the bias level is
        # otherwise anchored only through the marginalization prior and
        # wanders during vision-poor stretches
        if opts.bias_prior_gyro > 0:
            wb = np.array([1.0 / opts.bias_prior_gyro] * 3
                          + [1.0 / opts.bias_prior_accel] * 3)
            for kf in window.keyframes:
                sb = states[kf.index]
                rb = np.concatenate([sb.bg, sb.ba])
                Jb = np.zeros((6, KF_DIM))
                Jb[0:3, 9:12] = np.eye(3)
                Jb[3:6, 12:15] = np.eye(3)
                st.add(rb * wb, [(kf_offset[kf.index], Jb * wb[:, None])])

    if opts.use_relative_pose:
        for f in window.rel_factors:
            if f.i not in states or f.k not in states:
                continue
            Ti = states[f.i].pose()
            Tk = states[f.k].pose()
            r, Ji6, Jk6 = relative_pose_jacobians(f.delta_T, Ti, Tk)
            S = _sqrt_information(f.information)
            Ji = np.zeros((6, KF_DIM))
            Jk = np.zeros((6, KF_DIM))
            Ji[:, 0:6] = Ji6
            Jk[:, 0:6] = Jk6
            st.add(S @ r, [(kf_offset[f.i], S @ Ji), (kf_offset[f.k], S @ Jk)])

    if reproj_triplets is not None:
        rows0, cols0, vals0, r0 = reproj_triplets
        rows_rest = np.concatenate(st.rows) if st.rows else np.zeros(0, dtype=int)
        cols_rest = np.concatenate(st.cols) if st.cols else np.zeros(0, dtype=int)
        vals_rest = np.concatenate(st.vals) if st.vals else np.zeros(0)
        r_rest = np.concatenate(st.res) if st.res else np.zeros(0)
        rows = np.concatenate([rows0, rows_rest])
        cols = np.concatenate([cols0, cols_rest])
        vals = np.concatenate([vals0, vals_rest])
        r = np.concatenate([r0, r_rest])
        J = sp.coo_matrix((vals, (rows, cols)), shape=(st.row0, n_vars)).tocsr()
        return J, r
    J, r = st.build(n_vars)
    return J, r


def _total_cost(window: SlidingWindow, camera, extrinsic, opts,
                kf_offset, lm_offset, n_vars, batch: "_ReprojBatch" = None) -> float:
    """Residual-only evaluation; the reprojection family skips Jacobians."""
    cost = 0.0
    if opts.use_features:
        if batch is None:
            batch = _ReprojBatch(window, lm_offset, kf_offset, camera, extrinsic, opts)
        if batch.n:
            r_w, _, _ = batch.residuals(window)
            cost += float(np.sum(r_w * r_w))
    sub_opts = opts
    if opts.use_features:
        import copy

        sub_opts = copy.copy(opts)
        sub_opts.use_features = False
    J, r = _assemble(window, camera, extrinsic, sub_opts, kf_offset, {}, n_vars)
    cost += float(r @ r)
    if window.prior is not None:
        cost += 2.0 * window.prior.cost(window)
    return cost


def _apply_step(window: SlidingWindow, delta, kf_offset, lm_offset, opts):
    for kf in window.keyframes:
        off = kf_offset[kf.index]
        kf.state = kf.state.retract(delta[off : off + KF_DIM])
    for tid, off in lm_offset.items():
        tr = window.tracks[tid]
        tr.inverse_depth = max(tr.inverse_depth + float(delta[off]), opts.min_inverse_depth)


def _snapshot(window: SlidingWindow):
    states = [(kf.index, kf.state.copy()) for kf in window.keyframes]
    lams = {tid: tr.inverse_depth for tid, tr in window.tracks.items()}
    return states, lams


def _restore(window: SlidingWindow, snap):
    states, lams = snap
    for (idx, state), kf in zip(states, window.keyframes):
        assert kf.index == idx
        kf.state = state
    for tid, lam in lams.items():
        window.tracks[tid].inverse_depth = lam


def hybrid_optimize(window: SlidingWindow, camera: CameraModel, extrinsic: Pose,
                    opts: WindowOptions = None) -> SlidingWindow:
    """Damped Gauss-Newton over all states, biases, and inverse depths.

    Mutates and returns the window; sets ``window.failed`` instead of raising
    when the normal equations are unusable.
    """
    opts = opts or window.opts
    window.failed = False
    if window.size < 2:
        return window
    kf_offset, lm_offset, n_vars = window._variable_layout()
    batch = _ReprojBatch(window, lm_offset, kf_offset, camera, extrinsic, opts)

    lam_damp = opts.damping_init
    cost = _total_cost(window, camera, extrinsic, opts, kf_offset, lm_offset,
                       n_vars, batch)
    window.cost_trace = [cost]
    for _ in range(opts.max_iterations):
        J, r = _assemble(window, camera, extrinsic, opts, kf_offset, lm_offset,
                         n_vars, batch)
        H = (J.T @ J).toarray()
        g = -(J.T @ r)
        if window.prior is not None:
            pk = [kf_offset[k] for k in window.prior.keys]
            idx = np.concatenate([np.arange(o, o + KF_DIM) for o in pk]).astype(int)
            d = window.prior.deviation(window)
            H[np.ix_(idx, idx)] += window.prior.H
            g[idx] -= window.prior.H @ d - window.prior.b

        accepted = False
        for _ in range(8):
            D = np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(H + lam_damp * D, g)
            except np.linalg.LinAlgError:
                window.failed = True
                return window
            if not np.all(np.isfinite(delta)):
                window.failed = True
                return window
            snap = _snapshot(window)
            _apply_step(window, delta, kf_offset, lm_offset, opts)
            new_cost = _total_cost(window, camera, extrinsic, opts,
                                   kf_offset, lm_offset, n_vars, batch)
            if new_cost <= cost + 1e-15:
                cost = new_cost
                window.cost_trace.append(cost)
                lam_damp = max(lam_damp * opts.damping_down, 1e-12)
                accepted = True
                break
            _restore(window, snap)
            lam_damp *= opts.damping_up
        if not accepted:
            break
        if np.linalg.norm(delta) < opts.step_tolerance:
            break
    return window


def gradient_norm(window: SlidingWindow, camera: CameraModel, extrinsic: Pose,
                  opts: WindowOptions = None) -> float:
    """Norm of the total-cost gradient at the current states (diagnostics)."""
    opts = opts or window.opts
    kf_offset, lm_offset, n_vars = window._variable_layout()
    J, r = _assemble(window, camera, extrinsic, opts, kf_offset, lm_offset, n_vars)
    g = np.asarray(J.T @ r).ravel() * 2.0
    if window.prior is not None:
        pk = [kf_offset[k] for k in window.prior.keys]
        idx = np.concatenate([np.arange(o, o + KF_DIM) for o in pk]).astype(int)
        d = window.prior.deviation(window)
        g[idx] += 2.0 * (window.prior.H @ d - window.prior.b)
    return float(np.linalg.norm(g))


# --------------------------------------------------------------------------
# marginalization
# --------------------------------------------------------------------------

def schur_complement(H: np.ndarray, b: np.ndarray, m: int):
    """Eliminate the leading m variables of (H, b); returns (H', b').

    H is ordered [marginalized block, remaining block].
    """
    Hmm = H[:m, :m] + 1e-12 * np.eye(m)
    Hmr = H[:m, m:]
    Hrr = H[m:, m:]
    bm = b[:m]
    br = b[m:]
    sol = np.linalg.solve(Hmm, np.hstack([Hmr, bm[:, None]]))
    X = sol[:, :-1]
    y = sol[:, -1]
    H_new = Hrr - Hmr.T @ X
    b_new = br - Hmr.T @ y
    return 0.5 * (H_new + H_new.T), b_new


def marginalize_oldest(window: SlidingWindow, camera: CameraModel,
                       extrinsic: Pose, opts: WindowOptions = None) -> SlidingWindow:
    """Schur-eliminate the oldest keyframe and its anchored landmarks into the
    window prior. No-op when the window is not full."""
    opts = opts or window.opts
    if not window.full:
        return window
    old = window.keyframes[0]
    old_idx = old.index
    states = {kf.index: kf.state for kf in window.keyframes}

    # only factor families active in the optimization may enter the prior
    marg_tracks = [
        tid for tid, tr in window.tracks.items()
        if opts.use_features
        and tr.inverse_depth is not None and tr.anchor[0] == old_idx
        and sum(1 for o in tr.observations if o[0] in states) >= 2
    ]

    # variable layout local to the marginalization problem:
    # [old kf | marg landmarks | connected keyframes]
    connected = set()
    for i_idx, j_idx, _ in window.imu_factors:
        if old_idx in (i_idx, j_idx):
            connected.update((i_idx, j_idx))
    for f in window.rel_factors:
        if old_idx in (f.i, f.k):
            connected.update((f.i, f.k))
    for tid in marg_tracks:
        for k_idx, _ in window.tracks[tid].observations:
            if k_idx in states:
                connected.add(k_idx)
    if window.prior is not None:
        connected.update(window.prior.keys)
    connected.discard(old_idx)
    connected = sorted(connected)

    m = KF_DIM + len(marg_tracks)
    n = m + KF_DIM * len(connected)
    offset = {old_idx: 0}
    for j, tid in enumerate(marg_tracks):
        offset[("lm", tid)] = KF_DIM + j
    for j, k_idx in enumerate(connected):
        offset[k_idx] = m + KF_DIM * j

    H = np.zeros((n, n))
    b = np.zeros(n)

    def add_factor(r_white, blocks):
        Js = np.zeros((len(r_white), n))
        for col0, Jb in blocks:
            Js[:, col0 : col0 + Jb.shape[1]] += Jb
        H[:, :] += Js.T @ Js
        b[:] += -Js.T @ r_white

    # factors touching the old keyframe
    for i_idx, j_idx, pre in (window.imu_factors if opts.use_imu else []):
        if old_idx not in (i_idx, j_idx) or i_idx not in states or j_idx not in states:
            continue
        r, Ji, Jj = pre.residual_jacobians(states[i_idx], states[j_idx], opts.gravity)
        S = _sqrt_information(pre.information())
        add_factor(S @ r, [(offset[i_idx], S @ Ji), (offset[j_idx], S @ Jj)])
        si, sj = states[i_idx], states[j_idx]
        dt = max(pre.dt_total, 1e-6)
        rb = np.concatenate([sj.bg - si.bg, sj.ba - si.ba])
        w = np.array([1.0 / (opts.bias_gyro_walk * np.sqrt(dt))] * 3
                     + [1.0 / (opts.bias_accel_walk * np.sqrt(dt))] * 3)
        Jbi = np.zeros((6, KF_DIM))
        Jbj = np.zeros((6, KF_DIM))
        Jbi[0:3, 9:12] = -np.eye(3)
        Jbi[3:6, 12:15] = -np.eye(3)
        Jbj[0:3, 9:12] = np.eye(3)
        Jbj[3:6, 12:15] = np.eye(3)
        add_factor(rb * w, [(offset[i_idx], Jbi * w[:, None]),
                            (offset[j_idx], Jbj * w[:, None])])

    marg_rel = opts.use_relative_pose and opts.marginalize_relative_pose
    for f in (window.rel_factors if marg_rel else []):
        if old_idx not in (f.i, f.k) or f.i not in states or f.k not in states:
            continue
        r, Ji6, Jk6 = relative_pose_jacobians(
            f.delta_T, states[f.i].pose(), states[f.k].pose()
        )
        S = _sqrt_information(f.information)
        Ji = np.zeros((6, KF_DIM))
        Jk = np.zeros((6, KF_DIM))
        Ji[:, 0:6] = Ji6
        Jk[:, 0:6] = Jk6
        add_factor(S @ r, [(offset[f.i], S @ Ji), (offset[f.k], S @ Jk)])

    for tid in marg_tracks:
        tr = window.tracks[tid]
        lam = tr.inverse_depth
        sigma = opts.event_sigma_px if tr.source == "event-corner" else opts.image_sigma_px
        _, px_a = tr.anchor
        sa = states[old_idx]
        for k_idx, px_k in tr.observations[1:]:
            if k_idx not in states:
                continue
            r, J_i, J_k, J_lam = reprojection_jacobians(
                px_a, px_k, lam, sa, states[k_idx], camera, extrinsic
            )
            if r is None:
                continue
            r_w = r / sigma
            hw = _huber_weight(r_w, opts.huber_delta_px / sigma)
            s = hw / sigma
            add_factor(r * s, [
                (offset[old_idx], J_i * s),
                (offset[k_idx], J_k * s),
                (offset[("lm", tid)], J_lam * s),
            ])

    if window.prior is not None:
        d = window.prior.deviation(window)
        idx = np.concatenate(
            [np.arange(offset[k], offset[k] + KF_DIM) for k in window.prior.keys]
        ).astype(int)
        H[np.ix_(idx, idx)] += window.prior.H
        b[idx] += window.prior.b - window.prior.H @ d

    H_new, b_new = schur_complement(H, b, m)

    new_prior = MarginalPrior(
        keys=list(connected),
        H=H_new,
        b=b_new,
        lin_states={k: states[k].copy() for k in connected},
    )

    # shrink the window
    window.keyframes = window.keyframes[1:]
    window.imu_factors = [f for f in window.imu_factors if old_idx not in (f[0], f[1])]
    window.rel_factors = [f for f in window.rel_factors if old_idx not in (f.i, f.k)]
    for tid in marg_tracks:
        del window.tracks[tid]
    # drop any remaining observation references to the removed keyframe
    for tr in window.tracks.values():
        tr.observations = [(k, px) for k, px in tr.observations if k != old_idx]
    for tid in [t for t, tr in window.tracks.items() if not tr.observations]:
        del window.tracks[tid]
    window.prior = new_prior
    return window
