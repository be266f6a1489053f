"""IMU sample type, midpoint preintegration, and the preintegration residual.

Preintegrated terms are expressed in the body frame of the first sample and
carry first-order bias-correction Jacobians, so the residual stays linear in
the bias deviation from the linearization point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    quat_exp,
    quat_multiply,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

GRAVITY_W = np.array([0.0, 0.0, -9.81])


def so3_left_jacobian_inv(phi):
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass
class NavState:
    """Keyframe state: pose, velocity, and IMU biases."""

    p: np.ndarray
    q: np.ndarray                 # (w, x, y, z)
    v: np.ndarray
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3).copy()
        self.q = np.asarray(self.q, dtype=float).reshape(4).copy()
        self.v = np.asarray(self.v, dtype=float).reshape(3).copy()
        self.bg = np.asarray(self.bg, dtype=float).reshape(3).copy()
        self.ba = np.asarray(self.ba, dtype=float).reshape(3).copy()

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def pose(self) -> Pose:
        return Pose(self.q, self.p)

    def copy(self) -> "NavState":
        return NavState(self.p, self.q, self.v, self.bg, self.ba, self.t)

    def retract(self, delta) -> "NavState":
        """Apply a 15-vector perturbation [dp, dtheta, dv, dbg, dba]."""
        delta = np.asarray(delta, dtype=float)
        return NavState(
            p=self.p + delta[0:3],
            q=quat_multiply(self.q, quat_exp(delta[3:6])),
            v=self.v + delta[6:9],
            bg=self.bg + delta[9:12],
            ba=self.ba + delta[12:15],
            t=self.t,
        )


class ImuPreintegration:
    """Relative motion (delta_R, delta_v, delta_p) compounded from samples.

    ``gyro_sigma`` / ``accel_sigma`` are per-sample noise standard deviations
    used for the 9x9 covariance in order [theta, v, p].
    """

    def __init__(self, samples, bias_gyro=None, bias_accel=None,
                 gyro_sigma: float = 1e-3, accel_sigma: float = 1e-2):
        if len(samples) < 2:
            raise ValueError("preintegration needs at least two IMU samples")
        times = np.array([s.t for s in samples])
        if np.any(np.diff(times) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        self.bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, float).copy()
        self.ba = np.zeros(3) if bias_accel is None else np.asarray(bias_accel, float).copy()
        self.t0 = float(times[0])
        self.t1 = float(times[-1])
        self.dt_total = self.t1 - self.t0

        dR = np.eye(3)
        dv = np.zeros(3)
        dp = np.zeros(3)
        P = np.zeros((9, 9))
        J_R_bg = np.zeros((3, 3))
        J_v_bg = np.zeros((3, 3))
        J_v_ba = np.zeros((3, 3))
        J_p_bg = np.zeros((3, 3))
        J_p_ba = np.zeros((3, 3))
        Q = np.diag([gyro_sigma**2] * 3 + [accel_sigma**2] * 3)

        for a, b in zip(samples[:-1], samples[1:]):
            dt = b.t - a.t
            w_mid = 0.5 * (a.gyro + b.gyro) - self.bg
            rot_inc = so3_exp(w_mid * dt)
            R_next = dR @ rot_inc
            acc_a = dR @ (a.accel - self.ba)
            acc_b = R_next @ (b.accel - self.ba)
            acc_mid = 0.5 * (acc_a + acc_b)

            a_body = 0.5 * (a.accel + b.accel) - self.ba
            Jr_dt = so3_right_jacobian(w_mid * dt)

            # error-state transition, order [theta, v, p]
            F = np.eye(9)
            F[0:3, 0:3] = rot_inc.T
            F[3:6, 0:3] = -dR @ skew(a_body) * dt
            F[6:9, 0:3] = -0.5 * dR @ skew(a_body) * dt * dt
            F[6:9, 3:6] = np.eye(3) * dt
            G = np.zeros((9, 6))
            G[0:3, 0:3] = Jr_dt * dt
            G[3:6, 3:6] = dR * dt
            G[6:9, 3:6] = 0.5 * dR * dt * dt
            P = F @ P @ F.T + G @ Q @ G.T

            J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * dR @ skew(a_body) @ J_R_bg * dt * dt
            J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * dR * dt * dt
            J_v_bg = J_v_bg - dR @ skew(a_body) @ J_R_bg * dt
            J_v_ba = J_v_ba - dR * dt
            J_R_bg = rot_inc.T @ J_R_bg - Jr_dt * dt

            dp = dp + dv * dt + 0.5 * acc_mid * dt * dt
            dv = dv + acc_mid * dt
            dR = R_next

        self.delta_R = dR
        self.delta_v = dv
        self.delta_p = dp
        self.covariance = 0.5 * (P + P.T)
        self.J_R_bg = J_R_bg
        self.J_v_bg = J_v_bg
        self.J_v_ba = J_v_ba
        self.J_p_bg = J_p_bg
        self.J_p_ba = J_p_ba

    def information(self, floor: float = 1e-12):
        P = self.covariance + floor * np.eye(9)
        return np.linalg.inv(P)

    def corrected_deltas(self, bg, ba):
        dbg = np.asarray(bg, float) - self.bg
        dba = np.asarray(ba, float) - self.ba
        dR = self.delta_R @ so3_exp(self.J_R_bg @ dbg)
        dv = self.delta_v + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dp = self.delta_p + self.J_p_bg @ dbg + self.J_p_ba @ dba
        return dR, dv, dp

    def residual(self, si: NavState, sj: NavState, gravity=GRAVITY_W):
        """9-vector [r_R, r_v, r_p]; zero for states consistent with the samples."""
        g = np.asarray(gravity, dtype=float)
        dt = self.dt_total
        Ri = si.R
        Rj = sj.R
        dR, dv, dp = self.corrected_deltas(si.bg, si.ba)
        r_R = so3_log(dR.T @ Ri.T @ Rj)
        r_v = Ri.T @ (sj.v - si.v - g * dt) - dv
        r_p = Ri.T @ (sj.p - si.p - si.v * dt - 0.5 * g * dt * dt) - dp
        return np.concatenate([r_R, r_v, r_p])

    def residual_jacobians(self, si: NavState, sj: NavState, gravity=GRAVITY_W):
        """(residual, J_i, J_j): J_* are 9x15 w.r.t. [dp, dtheta, dv, dbg, dba]."""
        g = np.asarray(gravity, dtype=float)
        dt = self.dt_total
        Ri = si.R
        Rj = sj.R
        r = self.residual(si, sj, gravity)
        r_R = r[0:3]
        Jr_inv = so3_right_jacobian_inv(r_R)

        Ji = np.zeros((9, 15))
        Jj = np.zeros((9, 15))

        # rotation residual; the bias column carries the exact chain through
        # the first-order correction Exp(J_R_bg (bg - bg_lin))
        c = self.J_R_bg @ (si.bg - self.bg)
        A = self.delta_R.T @ Ri.T @ Rj
        Ji[0:3, 3:6] = -Jr_inv @ Rj.T @ Ri
        Jj[0:3, 3:6] = Jr_inv
        Ji[0:3, 9:12] = -Jr_inv @ A.T @ so3_right_jacobian(-c) @ self.J_R_bg

        # velocity residual
        yv = sj.v - si.v - g * dt
        Ji[3:6, 3:6] = skew(Ri.T @ yv)
        Ji[3:6, 6:9] = -Ri.T
        Jj[3:6, 6:9] = Ri.T
        Ji[3:6, 9:12] = -self.J_v_bg
        Ji[3:6, 12:15] = -self.J_v_ba

        # position residual
        yp = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt
        Ji[6:9, 3:6] = skew(Ri.T @ yp)
        Ji[6:9, 0:3] = -Ri.T
        Jj[6:9, 0:3] = Ri.T
        Ji[6:9, 6:9] = -Ri.T * dt
        Ji[6:9, 9:12] = -self.J_p_bg
        Ji[6:9, 12:15] = -self.J_p_ba

        return r, Ji, Jj


def slice_samples(samples, t0: float, t1: float):
    """Samples covering exactly [t0, t1], linearly interpolating the ends.

    Preintegrating between keyframes requires the integration span to match
    the state timestamps; raw sample grids rarely land on them.
    """
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    ts = np.array([s.t for s in samples])
    if t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9:
        raise ValueError(f"span [{t0}, {t1}] not covered by samples")

    def interp(t):
        i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        a, b = samples[i], samples[i + 1]
        if b.t == a.t:
            return ImuSample(t=t, gyro=a.gyro, accel=a.accel)
        alpha = (t - a.t) / (b.t - a.t)
        return ImuSample(
            t=t,
            gyro=(1 - alpha) * a.gyro + alpha * b.gyro,
            accel=(1 - alpha) * a.accel + alpha * b.accel,
        )

    inner = [s for s in samples if t0 + 1e-12 < s.t < t1 - 1e-12]
    return [interp(t0)] + inner + [interp(t1)]


def dead_reckon(samples, state0: NavState, gravity=GRAVITY_W):
    """Midpoint forward integration of raw samples from an initial state."""
    states = [state0.copy()]
    cur = state0.copy()
    g = np.asarray(gravity, dtype=float)
    for a, b in zip(samples[:-1], samples[1:]):
        dt = b.t - a.t
        w_mid = 0.5 * (a.gyro + b.gyro) - cur.bg
        R0 = cur.R
        q_next = quat_multiply(cur.q, quat_exp(w_mid * dt))
        R1 = quat_to_matrix(q_next)
        acc_w = 0.5 * (R0 @ (a.accel - cur.ba) + R1 @ (b.accel - cur.ba)) + g
        p_next = cur.p + cur.v * dt + 0.5 * acc_w * dt * dt
        v_next = cur.v + acc_w * dt
        cur = NavState(p=p_next, q=q_next, v=v_next, bg=cur.bg, ba=cur.ba, t=b.t)
        states.append(cur)
    return states
