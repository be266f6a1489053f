import numpy as np
import pytest

from evslam.geometry import Pose, quat_exp, so3_log
from evslam.imu import GRAVITY_W, ImuPreintegration, ImuSample, NavState, dead_reckon
from evslam.synthetic import ImuNoise, simulate_imu
from evslam.trajectory import circle_trajectory, sinusoid_trajectory, static_trajectory

from oracles import numeric_jacobian, relative_jacobian_error, rk4_navigation


def smooth_test_trajectory(duration=2.0):
    return sinusoid_trajectory(
        base_position=[0.1, -0.2, 0.3],
        translation_amplitude=[0.2, 0.15, 0.1],
        translation_freq_hz=[0.4, 0.3, 0.35],
        rotation_amplitude=[0.25, 0.2, 0.3],
        rotation_freq_hz=[0.35, 0.4, 0.3],
        duration=duration,
        translation_phase=[0.3, 1.1, -0.4],
        rotation_phase=[-0.2, 0.5, 0.9],
    )


class TestSimulateImu:
    def test_static_reads_gravity_reaction(self):
        traj = static_trajectory(Pose.identity(), 1.0)
        samples = simulate_imu(traj, rate=100.0)
        for s in samples[:: 20]:
            assert np.allclose(s.gyro, 0.0)
            assert np.allclose(s.accel, [0.0, 0.0, 9.81])

    def test_constant_yaw_rate(self):
        w = 0.7
        traj = circle_trajectory([0, 0, 0], 1.0, w, duration=2.0)
        samples = simulate_imu(traj, rate=50.0)
        for s in samples:
            assert np.allclose(s.gyro, [0.0, 0.0, w], atol=1e-12)

    def test_rates_and_timestamps(self):
        traj = static_trajectory(Pose.identity(), 0.5)
        samples = simulate_imu(traj, rate=200.0)
        ts = np.array([s.t for s in samples])
        assert len(samples) == 101
        assert np.allclose(np.diff(ts), 1.0 / 200.0)

    def test_noise_and_bias_applied(self):
        traj = static_trajectory(Pose.identity(), 0.5)
        noise = ImuNoise(gyro_sigma=0.01, accel_sigma=0.05,
                         gyro_bias=np.array([0.01, 0.0, -0.02]))
        samples = simulate_imu(traj, rate=100.0, noise=noise, seed=3)
        gyros = np.array([s.gyro for s in samples])
        assert abs(gyros[:, 0].mean() - 0.01) < 5e-3
        assert gyros[:, 0].std() > 1e-3

    def test_circle_dead_reckoning_matches_analytic(self):
        # noise-free samples at 200 Hz integrate back to the analytic pose
        traj = circle_trajectory([0, 0, 0], radius=0.8, angular_rate=0.5, duration=5.0)
        samples = simulate_imu(traj, rate=200.0)
        s0 = NavState(p=traj.position(0.0), q=traj.pose(0.0).q, v=traj.velocity(0.0), t=0.0)
        states = dead_reckon(samples, s0)
        p_err = np.linalg.norm(states[-1].p - traj.position(5.0))
        assert p_err < 1e-4
        # RK4 oracle agrees even tighter
        q_rk, v_rk, p_rk = rk4_navigation(traj, 0.0, 5.0, 4000)
        assert np.linalg.norm(p_rk - traj.position(5.0)) < 1e-8


class TestPreintegration:
    def test_static_is_identity(self):
        samples = [
            ImuSample(t=k * 0.01, gyro=[0, 0, 0], accel=[0, 0, 9.81]) for k in range(51)
        ]
        pre = ImuPreintegration(samples)
        # gravity is not removed inside preintegration: deltas absorb it
        si = NavState(p=np.zeros(3), q=[1, 0, 0, 0], v=np.zeros(3), t=0.0)
        sj = NavState(p=np.zeros(3), q=[1, 0, 0, 0], v=np.zeros(3), t=0.5)
        r = pre.residual(si, sj)
        assert np.linalg.norm(r) < 1e-9

    def test_zero_input_gives_zero_deltas(self):
        samples = [
            ImuSample(t=k * 0.01, gyro=[0, 0, 0], accel=[0, 0, 0]) for k in range(51)
        ]
        pre = ImuPreintegration(samples)
        assert np.allclose(pre.delta_R, np.eye(3), atol=1e-15)
        assert np.allclose(pre.delta_v, 0.0, atol=1e-15)
        assert np.allclose(pre.delta_p, 0.0, atol=1e-15)

    def test_constant_acceleration_deltas(self):
        # gravity-compensated accel of 1 m/s^2 along x for 1 s: v = at, p = at^2/2
        samples = [
            ImuSample(t=k * 0.005, gyro=[0, 0, 0], accel=[1.0, 0.0, 0.0])
            for k in range(201)
        ]
        pre = ImuPreintegration(samples)
        assert np.allclose(pre.delta_R, np.eye(3), atol=1e-12)
        assert np.allclose(pre.delta_v, [1.0, 0.0, 0.0], atol=1e-9)
        assert np.allclose(pre.delta_p, [0.5, 0.0, 0.0], atol=1e-9)

    def test_requires_two_samples(self):
        with pytest.raises(ValueError):
            ImuPreintegration([ImuSample(t=0.0, gyro=[0, 0, 0], accel=[0, 0, 0])])

    def test_deterministic(self):
        traj = smooth_test_trajectory()
        samples = simulate_imu(traj, rate=200.0, t1=0.5)
        a = ImuPreintegration(samples)
        b = ImuPreintegration(samples)
        assert np.array_equal(a.delta_p, b.delta_p)
        assert np.array_equal(a.covariance, b.covariance)

    def test_covariance_psd(self):
        traj = smooth_test_trajectory()
        samples = simulate_imu(traj, rate=200.0, t1=0.5)
        pre = ImuPreintegration(samples)
        eig = np.linalg.eigvalsh(pre.covariance)
        assert eig.min() >= -1e-15

    def test_matches_rk4_over_half_second(self):
        traj = smooth_test_trajectory()
        for t0 in (0.0, 0.5, 1.0):
            t1 = t0 + 0.5
            samples = simulate_imu(traj, rate=200.0, t0=t0, t1=t1)
            pre = ImuPreintegration(samples)
            q1, v1, p1 = rk4_navigation(traj, t0, t1, 2000)
            Ri = traj.pose(t0).R
            vi, pi = traj.velocity(t0), traj.position(t0)
            dt = t1 - t0
            from evslam.geometry import quat_to_matrix
            dR_gt = Ri.T @ quat_to_matrix(q1)
            dv_gt = Ri.T @ (v1 - vi - GRAVITY_W * dt)
            dp_gt = Ri.T @ (p1 - pi - vi * dt - 0.5 * GRAVITY_W * dt * dt)
            assert np.linalg.norm(pre.delta_p - dp_gt) < 1e-5
            assert np.linalg.norm(so3_log(pre.delta_R.T @ dR_gt)) < 1e-5
            assert np.linalg.norm(pre.delta_v - dv_gt) < 1e-5


class TestResidualJacobians:
    def rand_state(self, rng, t):
        return NavState(
            p=rng.normal(size=3),
            q=quat_exp(rng.normal(size=3)),
            v=rng.normal(size=3) * 0.5,
            bg=rng.normal(size=3) * 0.01,
            ba=rng.normal(size=3) * 0.05,
            t=t,
        )

    def test_residual_zero_for_consistent_states(self):
        traj = smooth_test_trajectory()
        samples = simulate_imu(traj, rate=400.0, t0=0.2, t1=0.4)
        pre = ImuPreintegration(samples)
        si = NavState(traj.position(0.2), traj.pose(0.2).q, traj.velocity(0.2), t=0.2)
        sj = NavState(traj.position(0.4), traj.pose(0.4).q, traj.velocity(0.4), t=0.4)
        r = pre.residual(si, sj)
        # midpoint integration truncation only
        assert np.linalg.norm(r) < 1e-6

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(42)
        traj = smooth_test_trajectory()
        samples = simulate_imu(traj, rate=100.0, t0=0.0, t1=0.2)
        worst = 0.0
        for _ in range(20):
            pre = ImuPreintegration(
                samples,
                bias_gyro=rng.normal(size=3) * 0.01,
                bias_accel=rng.normal(size=3) * 0.05,
            )
            si = self.rand_state(rng, 0.0)
            sj = self.rand_state(rng, 0.2)
            r0, Ji, Jj = pre.residual_jacobians(si, sj)

            def f_i(d):
                return pre.residual(si.retract(d), sj)

            def f_j(d):
                return pre.residual(si, sj.retract(d))

            Ji_num = numeric_jacobian(f_i, np.zeros(15), eps=1e-6)
            Jj_num = numeric_jacobian(f_j, np.zeros(15), eps=1e-6)
            worst = max(worst, relative_jacobian_error(Ji, Ji_num))
            worst = max(worst, relative_jacobian_error(Jj, Jj_num))
        assert worst <= 1e-4
