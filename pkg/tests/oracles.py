"""Independent numerical oracles shared across the test suite.

These deliberately avoid the library's own integration / voting / warping
code paths: RK4 where the library uses midpoint rules, per-pixel replay
where the library vectorizes, closed forms where the library iterates.
"""

import numpy as np

from evslam.geometry import Pose, quat_multiply, quat_normalize, quat_to_matrix
from evslam.imu import GRAVITY_W


def rk4_navigation(traj, t0, t1, n_steps, gravity=GRAVITY_W):
    """RK4-integrate attitude/velocity/position from the trajectory's own
    analytic angular rate and specific force; returns final (q, v, p)."""
    g = np.asarray(gravity, dtype=float)

    def omega(t):
        return traj.omega_body(t)

    def specific_force(t):
        return traj.pose(t).R.T @ (traj.acceleration(t) - g)

    def deriv(t, q, v):
        R = quat_to_matrix(q)
        w = omega(t)
        dq = 0.5 * quat_multiply(q, np.concatenate([[0.0], w]))
        dv = g + R @ specific_force(t)
        return dq, dv

    q = traj.pose(t0).q.copy()
    v = traj.velocity(t0).copy()
    p = traj.position(t0).copy()
    h = (t1 - t0) / n_steps
    for k in range(n_steps):
        t = t0 + k * h
        dq1, dv1 = deriv(t, q, v)
        dp1 = v
        dq2, dv2 = deriv(t + h / 2, q + h / 2 * dq1, v + h / 2 * dv1)
        dp2 = v + h / 2 * dv1
        dq3, dv3 = deriv(t + h / 2, q + h / 2 * dq2, v + h / 2 * dv2)
        dp3 = v + h / 2 * dv2
        dq4, dv4 = deriv(t + h, q + h * dq3, v + h * dv3)
        dp4 = v + h * dv3
        q = quat_normalize(q + h / 6 * (dq1 + 2 * dq2 + 2 * dq3 + dq4))
        v = v + h / 6 * (dv1 + 2 * dv2 + 2 * dv3 + dv4)
        p = p + h / 6 * (dp1 + 2 * dp2 + 2 * dp3 + dp4)
    return q, v, p


def numeric_jacobian(fn, x, eps=1e-6):
    """Central finite differences of fn: R^n -> R^m."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        fp = np.asarray(fn(x + dx))
        fm = np.asarray(fn(x - dx))
        J[:, i] = (fp - fm) / (2 * eps)
    return J


def relative_jacobian_error(J_analytic, J_numeric):
    scale = max(np.max(np.abs(J_numeric)), np.max(np.abs(J_analytic)), 1e-12)
    return np.max(np.abs(J_analytic - J_numeric)) / scale


def ray_plane_transfer(x_z0, z0, zi, center):
    """Transfer a normalized canonical-plane point to plane Zi by intersecting
    the ray (camera center -> point on Z0) with Z = Zi, in the RV frame."""
    xc, yc, zc = center
    p0 = np.array([x_z0[0] * z0, x_z0[1] * z0, z0])
    c = np.asarray([xc, yc, zc], dtype=float)
    d = p0 - c
    tau = (zi - zc) / d[2]
    p = c + tau * d
    return np.array([p[0] / zi, p[1] / zi])


def horn_se3(src, dst):
    """Closed-form rigid alignment dst ~= R @ src + t (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t
