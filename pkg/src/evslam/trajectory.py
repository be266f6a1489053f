"""Analytic camera/body trajectories with closed-form derivatives.

Orientation is parameterized as R(t) = Exp(phi(t)) so body angular velocity
follows exactly from the right Jacobian: omega_body = Jr(phi) @ dphi/dt.
Everything is evaluable at arbitrary t, which the IMU simulator and the
RK4 test oracles rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Pose, quat_exp, so3_right_jacobian


@dataclass
class TrajectorySpec:
    """Twice-differentiable pose path over [0, duration] seconds."""

    position: Callable[[float], np.ndarray]
    velocity: Callable[[float], np.ndarray]
    acceleration: Callable[[float], np.ndarray]
    rotvec: Callable[[float], np.ndarray]
    rotvec_rate: Callable[[float], np.ndarray]
    duration: float

    def pose(self, t: float) -> Pose:
        return Pose(quat_exp(self.rotvec(t)), self.position(t))

    def omega_body(self, t: float) -> np.ndarray:
        return so3_right_jacobian(self.rotvec(t)) @ self.rotvec_rate(t)


def static_trajectory(pose: Pose, duration: float) -> TrajectorySpec:
    phi0 = pose.log()[3:6]
    p0 = pose.t.copy()
    z = np.zeros(3)
    return TrajectorySpec(
        position=lambda t: p0,
        velocity=lambda t: z,
        acceleration=lambda t: z,
        rotvec=lambda t: phi0,
        rotvec_rate=lambda t: z,
        duration=duration,
    )


def line_trajectory(start, velocity, duration, rotvec=None) -> TrajectorySpec:
    """Constant-velocity translation at fixed attitude."""
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    phi0 = np.zeros(3) if rotvec is None else np.asarray(rotvec, dtype=float)
    z = np.zeros(3)
    return TrajectorySpec(
        position=lambda t: start + velocity * t,
        velocity=lambda t: velocity,
        acceleration=lambda t: z,
        rotvec=lambda t: phi0,
        rotvec_rate=lambda t: z,
        duration=duration,
    )


def circle_trajectory(center, radius, angular_rate, duration, z_axis_yaw=True) -> TrajectorySpec:
    """Horizontal circle at constant speed, optionally yawing with the motion."""
    center = np.asarray(center, dtype=float)
    w = float(angular_rate)

    def position(t):
        a = w * t
        return center + radius * np.array([np.cos(a), np.sin(a), 0.0])

    def velocity(t):
        a = w * t
        return radius * w * np.array([-np.sin(a), np.cos(a), 0.0])

    def acceleration(t):
        a = w * t
        return -radius * w * w * np.array([np.cos(a), np.sin(a), 0.0])

    if z_axis_yaw:
        rotvec = lambda t: np.array([0.0, 0.0, w * t])
        rotvec_rate = lambda t: np.array([0.0, 0.0, w])
    else:
        zero = np.zeros(3)
        rotvec = lambda t: zero
        rotvec_rate = lambda t: zero

    return TrajectorySpec(position, velocity, acceleration, rotvec, rotvec_rate, duration)


def sinusoid_trajectory(
    base_position,
    translation_amplitude,
    translation_freq_hz,
    rotation_amplitude,
    rotation_freq_hz,
    duration,
    base_rotvec=None,
    translation_phase=None,
    rotation_phase=None,
) -> TrajectorySpec:
    """Smooth multi-axis sinusoidal wiggle; the workhorse spline-like test path."""
    p0 = np.asarray(base_position, dtype=float)
    At = np.asarray(translation_amplitude, dtype=float)
    Ar = np.asarray(rotation_amplitude, dtype=float)
    wt = 2.0 * np.pi * np.asarray(translation_freq_hz, dtype=float) * np.ones(3)
    wr = 2.0 * np.pi * np.asarray(rotation_freq_hz, dtype=float) * np.ones(3)
    phit = np.zeros(3) if translation_phase is None else np.asarray(translation_phase, float)
    phir = np.zeros(3) if rotation_phase is None else np.asarray(rotation_phase, float)
    phi0 = np.zeros(3) if base_rotvec is None else np.asarray(base_rotvec, dtype=float)

    # sin(wt+phase) - sin(phase) keeps the path anchored at p0 / phi0 at t=0
    position = lambda t: p0 + At * (np.sin(wt * t + phit) - np.sin(phit))
    velocity = lambda t: At * wt * np.cos(wt * t + phit)
    acceleration = lambda t: -At * wt * wt * np.sin(wt * t + phit)
    rotvec = lambda t: phi0 + Ar * (np.sin(wr * t + phir) - np.sin(phir))
    rotvec_rate = lambda t: Ar * wr * np.cos(wr * t + phir)

    return TrajectorySpec(position, velocity, acceleration, rotvec, rotvec_rate, duration)


def sample_poses(traj: TrajectorySpec, rate_hz: float, t0: float = 0.0, t1=None):
    """(timestamps, poses) sampled at a fixed rate over [t0, t1]."""
    if t1 is None:
        t1 = traj.duration
    n = int(np.floor((t1 - t0) * rate_hz + 1e-9)) + 1
    times = t0 + np.arange(n) / rate_hz
    return times, [traj.pose(t) for t in times]
