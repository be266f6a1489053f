"""Rigid-body geometry: quaternions, SO(3) maps, and SE(3) poses.

Quaternions are stored scalar-first (w, x, y, z), Hamilton convention.
A ``Pose`` maps points from its own frame into the parent frame:
``x_parent = R @ x_local + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize zero quaternion")
    q = q / n
    # fix sign so w >= 0 keeps log/compose deterministic
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize([w, x, y, z])


def so3_exp(phi):
    """Rotation matrix of an axis-angle vector, with small-angle series."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Axis-angle vector of a rotation matrix (inverse of so3_exp)."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-8:
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return w
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal form degenerates; use the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # resolve signs from the largest component
        k = int(np.argmax(axis))
        if axis[k] < _EPS:
            return np.zeros(3)
        s = np.ones(3)
        for j in range(3):
            if j != k and A[k, j] < 0:
                s[j] = -1.0
        axis = axis * s
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    w = 0.5 / np.sin(theta) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )
    return theta * w


def quat_exp(phi):
    """Quaternion of an axis-angle vector."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    if theta < 1e-8:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return quat_normalize(q)
    axis = phi / theta
    return quat_normalize(
        np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])
    )


def so3_right_jacobian(phi):
    """Right Jacobian of SO(3): relates body angular rates to axis-angle rates."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (1.0 / 6.0) * (K @ K)
    a = (1 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * K + b * (K @ K)


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * (K @ K)
    cot_half = 1.0 / np.tan(theta / 2.0)
    b = (1.0 / theta**2) - cot_half / (2.0 * theta)
    return np.eye(3) + 0.5 * K + b * (K @ K)


@dataclass(frozen=True)
class Pose:
    """SE(3) element: unit quaternion (w,x,y,z) + translation (meters)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rotation_translation(R, t) -> "Pose":
        return Pose(matrix_to_quat(R), t)

    @staticmethod
    def exp(xi) -> "Pose":
        """Pose from a 6-vector [translation, axis-angle] (decoupled, not SE(3) exp)."""
        xi = np.asarray(xi, dtype=float)
        return Pose(quat_exp(xi[3:6]), xi[:3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        Ri = quat_to_matrix(qi)
        return Pose(qi, -(Ri @ self.t))

    def act(self, points):
        """Apply to one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def log(self):
        """6-vector [translation, axis-angle] (matches Pose.exp)."""
        return np.concatenate([self.t, so3_log(self.R)])

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.R)))

    def __repr__(self):
        return f"Pose(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def pose_interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation on SE(3) split as slerp + lerp, alpha in [0, 1]."""
    qa, qb = a.q, b.q
    if np.dot(qa, qb) < 0:
        qb = -qb
    dot = np.clip(np.dot(qa, qb), -1.0, 1.0)
    if dot > 1 - 1e-10:
        q = quat_normalize(qa + alpha * (qb - qa))
    else:
        omega = np.arccos(dot)
        q = (np.sin((1 - alpha) * omega) * qa + np.sin(alpha * omega) * qb) / np.sin(omega)
        q = quat_normalize(q)
    t = (1 - alpha) * a.t + alpha * b.t
    return Pose(q, t)


class PoseBuffer:
    """Time-indexed pose lookup with interpolation between samples."""

    def __init__(self):
        self._times = []
        self._poses = []

    def append(self, t: float, pose: Pose):
        if self._times and t < self._times[-1]:
            raise ValueError(f"pose timestamps must be non-decreasing, got {t}")
        self._times.append(float(t))
        self._poses.append(pose)

    def __len__(self):
        return len(self._times)

    @property
    def times(self):
        return np.asarray(self._times)

    def pose_at(self, t: float) -> Pose:
        if not self._times:
            raise ValueError("empty pose buffer")
        times = self._times
        if t <= times[0]:
            if times[0] - t > 1e-9:
                raise ValueError(f"query {t} before first pose {times[0]}")
            return self._poses[0]
        if t >= times[-1]:
            if t - times[-1] > 1e-9:
                raise ValueError(f"query {t} after last pose {times[-1]}")
            return self._poses[-1]
        idx = int(np.searchsorted(times, t, side="right")) - 1
        t0, t1 = times[idx], times[idx + 1]
        if t1 - t0 < _EPS:
            return self._poses[idx]
        alpha = (t - t0) / (t1 - t0)
        return pose_interpolate(self._poses[idx], self._poses[idx + 1], alpha)

    def covers(self, t0: float, t1: float) -> bool:
        if not self._times:
            return False
        return self._times[0] - 1e-9 <= t0 and t1 <= self._times[-1] + 1e-9

    def rotations_translations_at(self, ts):
        """Vectorized interpolation: (N,3,3) rotations and (N,3) translations.

        Queries must lie within the covered span (1 ns slack at the ends).
        """
        ts = np.asarray(ts, dtype=float).reshape(-1)
        times = self.times
        if len(times) == 0:
            raise ValueError("empty pose buffer")
        if np.any(ts < times[0] - 1e-9) or np.any(ts > times[-1] + 1e-9):
            raise ValueError("query outside pose buffer span")
        idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, max(len(times) - 2, 0))
        if len(times) == 1:
            R = np.repeat(quat_to_matrix(self._poses[0].q)[None], len(ts), axis=0)
            t = np.repeat(self._poses[0].t[None], len(ts), axis=0)
            return R, t
        t0 = times[idx]
        t1 = times[idx + 1]
        span = np.maximum(t1 - t0, _EPS)
        alpha = np.clip((ts - t0) / span, 0.0, 1.0)
        qs = np.stack([p.q for p in self._poses])
        trs = np.stack([p.t for p in self._poses])
        qa = qs[idx]
        qb = qs[idx + 1]
        flip = np.sum(qa * qb, axis=1) < 0
        qb = np.where(flip[:, None], -qb, qb)
        dot = np.clip(np.sum(qa * qb, axis=1), -1.0, 1.0)
        omega = np.arccos(dot)
        small = omega < 1e-6
        with np.errstate(invalid="ignore", divide="ignore"):
            wa = np.where(small, 1.0 - alpha, np.sin((1 - alpha) * omega) / np.sin(omega))
            wb = np.where(small, alpha, np.sin(alpha * omega) / np.sin(omega))
        q = wa[:, None] * qa + wb[:, None] * qb
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        t = (1 - alpha)[:, None] * trs[idx] + alpha[:, None] * trs[idx + 1]
        # batch quaternion -> rotation matrix
        w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        R = np.empty((len(ts), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return R, t
