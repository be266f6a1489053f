"""Acceptance gate: one test per criterion, each printing a PASS line with
its measured numbers. Thresholds are fixed here, not tuned at runtime.

Synthetic datasets are generated on demand into a session-scoped tmp dir;
the heavyweight sequences are built once and shared between criteria.
"""

import os
import time
import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore")

from evslam.backend import NavState, reprojection_jacobians
from evslam.camera import CameraModel
from evslam.config import PipelineConfig
from evslam.dataio import load_dataset, load_tum
from evslam.direct_align import (
    AlignOptions,
    align_event_mats,
    photometric_cost_and_gradient,
    relative_pose_jacobians,
    relative_pose_residual,
    warp_active_pixels,
)
from evslam.evaluate import ate_rmse, depth_metrics, trajectory_length
from evslam.events import EventStream, build_event_mat, build_time_surface
from evslam.geometry import Pose, PoseBuffer, quat_exp, so3_log
from evslam.imu import GRAVITY_W, ImuPreintegration
from evslam.inpaint import region_grow_segment
from evslam.pipeline import (
    render_gt_depths_at_rvs,
    run_mapping,
    run_simulate,
    run_slam,
    run_tracking,
)
from evslam.space_sweep import canonical_homography, transfer_across_planes
from evslam.synthetic import ground_truth_depth, preset_scene, simulate_imu
from evslam.tsdf import (
    TsdfGrid,
    extract_mesh,
    fill_grid_from_sdf,
    integrate_depth_map,
    point_weight,
    update_voxel,
)
from evslam.trajectory import sinusoid_trajectory

from oracles import numeric_jacobian, ray_plane_transfer, relative_jacobian_error


def report(name, runtime, detail):
    print(f"\n[ACCEPTANCE] {name}: PASS ({runtime:.1f}s) {detail}")


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# -- shared heavyweight datasets ---------------------------------------------

@pytest.fixture(scope="session")
def room_dataset(workdir):
    # 10 s room orbit whose right front wall is horizontal stripes: a
    # low-texture segment with events but nearly no corners. Bias priors
    # reflect the rig's noise-free IMU.
    cfg = PipelineConfig()
    cfg.sim_duration = 10.0
    cfg.sim_scene = "checker_room_lowtex"
    cfg.sim_trajectory = "orbit"
    cfg.sim_speed = 0.25
    cfg.sim_threshold = 0.1
    cfg.events_mat_dt = 0.04
    cfg.tracker_bias_prior_gyro = 1e-3
    cfg.tracker_bias_prior_accel = 1e-2
    out = str(workdir / "room10s")
    run_simulate(cfg, out)
    return cfg, out


@pytest.fixture(scope="session")
def sweep_dataset(workdir):
    cfg = PipelineConfig()
    cfg.sim_duration = 1.0
    cfg.sim_scene = "plane_mosaic"
    cfg.sim_trajectory = "sweep"
    cfg.sim_speed = 0.4
    cfg.sim_render_rate = 250.0
    cfg.sim_threshold = 0.15
    cfg.mapping_rv_translation = 0.5
    cfg.mapping_min_votes = 30.0
    cfg.mapping_vote_ratio = 3.0
    out = str(workdir / "sweep")
    run_simulate(cfg, out)
    return cfg, out


class TestCriterion1Representations:
    def test_time_surface_and_event_mat_oracles(self):
        t_start = time.perf_counter()
        rng = np.random.default_rng(101)
        w, h = 64, 48
        worst_ts = 0.0
        for trial in range(10):
            n = 100_000
            t = np.sort(rng.uniform(0.0, 2.0, n))
            u = rng.integers(0, w, n)
            v = rng.integers(0, h, n)
            p = rng.choice([-1, 1], n)
            stream = EventStream(t, u, v, p, w, h)
            t_ref = 2.0
            eta = 0.05
            ts = build_time_surface(stream, t_ref, eta)

            # oracle: group per pixel preserving arrival order (stable sort),
            # replay each pixel chronologically, keep the last event
            lin = v * w + u
            order = np.argsort(lin, kind="stable")
            lin_s = lin[order]
            last_of_group = np.r_[np.diff(lin_s) != 0, True]
            sel = order[last_of_group]
            expected = np.zeros((h, w))
            expected[v[sel], u[sel]] = p[sel] * np.exp(-(t_ref - t[sel]) / eta)
            worst_ts = max(worst_ts, float(np.max(np.abs(ts.values - expected))))
            assert worst_ts <= 1e-12

            # event mat against a brute-force window scan
            t0, dt = 0.7, 0.15
            mat = build_event_mat(stream, t0, dt)
            in_win = (t >= t0) & (t <= t0 + dt)
            counts = np.zeros((h, w), dtype=int)
            np.add.at(counts, (v[in_win], u[in_win]), 1)
            assert np.array_equal(mat.values, np.where(counts > 0, 255.0, 0.0))
        runtime = time.perf_counter() - t_start
        assert runtime < 1.0
        report("criterion 1 (representations)", runtime,
               f"10 streams x 1e5 events, worst TS dev {worst_ts:.2e}")


class TestCriterion2Jacobians:
    CAM = CameraModel(fx=110.0, fy=110.0, cx=32.0, cy=24.0, width=64, height=48)

    def _mat_pair(self, rng):
        from test_direct_align import mat_from_pixels

        px = np.column_stack([rng.uniform(8, 56, 150), rng.uniform(8, 40, 150)])
        ref = mat_from_pixels(px, w=64, h=48)
        delta = Pose(quat_exp(rng.normal(size=3) * 0.01), rng.normal(size=3) * 0.02)
        warped, _, _, ok = warp_active_pixels(px, delta, self.CAM, Pose.identity(), 0.5)
        cur = mat_from_pixels(warped[ok], w=64, h=48)
        return ref, cur

    def test_jacobian_suite(self):
        t_start = time.perf_counter()
        rng = np.random.default_rng(202)
        worst = {"photometric": 0.0, "relative_pose": 0.0,
                 "reprojection": 0.0, "imu": 0.0}

        # Eq.-5-style photometric cost gradient (100 configs, multi-step FD:
        # piecewise-bilinear mats make single-step FD unreliable at kinks)
        opts = AlignOptions()
        for _ in range(100):
            ref, cur = self._mat_pair(rng)
            T0 = Pose(quat_exp(rng.normal(size=3) * 0.005), rng.normal(size=3) * 0.01)

            def cost(d):
                c, _ = photometric_cost_and_gradient(
                    ref, cur, T0 @ Pose.exp(d), self.CAM, Pose.identity(), 0.5, opts)
                return np.array([c])

            _, grad = photometric_cost_and_gradient(
                ref, cur, T0, self.CAM, Pose.identity(), 0.5, opts)
            err = min(
                relative_jacobian_error(grad, numeric_jacobian(cost, np.zeros(6), eps=e)[0])
                for e in (1e-6, 1e-7, 1e-8))
            worst["photometric"] = max(worst["photometric"], err)

        # Eq.-6 relative-pose residual
        for _ in range(100):
            T_wi = Pose(quat_exp(rng.normal(size=3) * 0.5), rng.normal(size=3))
            T_wk = Pose(quat_exp(rng.normal(size=3) * 0.5), rng.normal(size=3))
            delta = (T_wi.inverse() @ T_wk).inverse() @ Pose.exp(rng.normal(size=6) * 0.05)
            _, Ji, Jk = relative_pose_jacobians(delta, T_wi, T_wk)

            def fi(d):
                Ti = Pose((T_wi @ Pose.exp(np.r_[np.zeros(3), d[3:]])).q, T_wi.t + d[:3])
                return relative_pose_residual(delta, Ti, T_wk)

            def fk(d):
                Tk = Pose((T_wk @ Pose.exp(np.r_[np.zeros(3), d[3:]])).q, T_wk.t + d[:3])
                return relative_pose_residual(delta, T_wi, Tk)

            err = max(
                relative_jacobian_error(Ji, numeric_jacobian(fi, np.zeros(6), eps=1e-6)),
                relative_jacobian_error(Jk, numeric_jacobian(fk, np.zeros(6), eps=1e-6)))
            worst["relative_pose"] = max(worst["relative_pose"], err)

        # Eq.-8 reprojection residual
        ext = Pose(quat_exp([0.01, -0.02, 0.005]), [0.04, -0.01, 0.02])
        checked = 0
        while checked < 100:
            lam = rng.uniform(0.2, 1.0)
            px_i = rng.uniform([8, 8], [56, 40])
            px_k = rng.uniform([8, 8], [56, 40])
            si = NavState(p=rng.normal(size=3) * 0.3,
                          q=quat_exp(rng.normal(size=3) * 0.3), v=np.zeros(3))
            sk = NavState(p=rng.normal(size=3) * 0.3,
                          q=quat_exp(rng.normal(size=3) * 0.3), v=np.zeros(3))
            r, Ji, Jk, Jlam = reprojection_jacobians(px_i, px_k, lam, si, sk, self.CAM, ext)
            if r is None:
                continue

            def f(d, which):
                from evslam.backend import _reprojection_residual_states

                s2i = si.retract(d[:15]) if which == "i" else si
                s2k = sk.retract(d[:15]) if which == "k" else sk
                rr, _ = _reprojection_residual_states(
                    px_i, px_k, lam + d[15], s2i, s2k, self.CAM, ext)
                return rr if rr is not None else np.full(2, np.nan)

            Ji_num = numeric_jacobian(lambda d: f(d, "i"), np.zeros(16), eps=1e-6)
            Jk_num = numeric_jacobian(lambda d: f(d, "k"), np.zeros(16), eps=1e-6)
            if not (np.all(np.isfinite(Ji_num)) and np.all(np.isfinite(Jk_num))):
                continue
            checked += 1
            err = max(relative_jacobian_error(Ji, Ji_num[:, :15]),
                      relative_jacobian_error(Jk, Jk_num[:, :15]),
                      relative_jacobian_error(Jlam, Ji_num[:, 15:16]))
            worst["reprojection"] = max(worst["reprojection"], err)

        # IMU preintegration residual
        traj = sinusoid_trajectory(
            base_position=[0, 0, 0], translation_amplitude=[0.2, 0.15, 0.1],
            translation_freq_hz=[0.4, 0.3, 0.35], rotation_amplitude=[0.2, 0.25, 0.15],
            rotation_freq_hz=[0.3, 0.35, 0.4], duration=0.5)
        samples = simulate_imu(traj, rate=100.0, t1=0.25)
        for _ in range(100):
            pre = ImuPreintegration(samples, bias_gyro=rng.normal(size=3) * 0.01,
                                    bias_accel=rng.normal(size=3) * 0.05)
            si = NavState(p=rng.normal(size=3), q=quat_exp(rng.normal(size=3)),
                          v=rng.normal(size=3) * 0.5, bg=rng.normal(size=3) * 0.01,
                          ba=rng.normal(size=3) * 0.05)
            sj = NavState(p=rng.normal(size=3), q=quat_exp(rng.normal(size=3)),
                          v=rng.normal(size=3) * 0.5, bg=rng.normal(size=3) * 0.01,
                          ba=rng.normal(size=3) * 0.05)
            _, Ji, Jj = pre.residual_jacobians(si, sj)
            Ji_num = numeric_jacobian(lambda d: pre.residual(si.retract(d), sj),
                                      np.zeros(15), eps=1e-6)
            Jj_num = numeric_jacobian(lambda d: pre.residual(si, sj.retract(d)),
                                      np.zeros(15), eps=1e-6)
            err = max(relative_jacobian_error(Ji, Ji_num),
                      relative_jacobian_error(Jj, Jj_num))
            worst["imu"] = max(worst["imu"], err)

        runtime = time.perf_counter() - t_start
        for name, err in worst.items():
            assert err <= 1e-4, f"{name}: rel err {err}"
        assert runtime < 30.0
        report("criterion 2 (jacobian suite)", runtime,
               " ".join(f"{k}={v:.2e}" for k, v in worst.items()))


class TestCriterion3DirectAlignment:
    CAM = CameraModel(fx=110.0, fy=110.0, cx=64.0, cy=48.0, width=128, height=96)
    LAM0 = 0.5

    def test_fifty_known_motions(self):
        from test_direct_align import mat_from_pixels

        t_start = time.perf_counter()
        rng = np.random.default_rng(303)
        rms_all = []
        for trial in range(50):
            px = np.column_stack([rng.uniform(12, 116, 300), rng.uniform(12, 84, 300)])
            if trial < 5:
                delta = Pose.identity()   # identity pairs return identity
            else:
                # draw until the max active-pixel flow is <= 3 px
                while True:
                    delta = Pose(quat_exp(rng.normal(size=3) * 0.012),
                                 rng.normal(size=3) * 0.025)
                    w_true, _, _, ok = warp_active_pixels(
                        px, delta, self.CAM, Pose.identity(), self.LAM0)
                    flow = np.linalg.norm(w_true[ok] - px[ok], axis=1)
                    if len(flow) and flow.max() <= 3.0 and flow.max() > 0.2:
                        break
            ref = mat_from_pixels(px)
            w_true, _, _, ok = warp_active_pixels(px, delta, self.CAM,
                                                  Pose.identity(), self.LAM0)
            cur = mat_from_pixels(w_true[ok])
            res = align_event_mats(ref, cur, Pose.identity(), self.CAM, self.LAM0)
            assert res.converged
            if trial < 5:
                assert np.linalg.norm(res.delta_T.t) < 1e-9
                assert res.delta_T.rotation_angle() < 1e-9
                rms_all.append(0.0)
                continue
            w_rec, _, _, ok2 = warp_active_pixels(px, res.delta_T, self.CAM,
                                                  Pose.identity(), self.LAM0)
            keep = ok & ok2
            rms = float(np.sqrt(np.mean(np.sum((w_true[keep] - w_rec[keep]) ** 2, axis=1))))
            rms_all.append(rms)
            assert rms <= 0.2, f"trial {trial}: rms {rms}"
        runtime = time.perf_counter() - t_start
        assert runtime < 20.0
        report("criterion 3 (direct alignment)", runtime,
               f"50 pairs, worst RMS {max(rms_all):.3f} px")


class TestCriterion4ImuOracle:
    def test_preintegration_vs_rk4(self):
        from oracles import rk4_navigation
        from evslam.geometry import quat_to_matrix

        t_start = time.perf_counter()
        traj = sinusoid_trajectory(
            base_position=[0.1, -0.2, 0.3],
            translation_amplitude=[0.2, 0.15, 0.1],
            translation_freq_hz=[0.35, 0.3, 0.32],
            rotation_amplitude=[0.2, 0.18, 0.22],
            rotation_freq_hz=[0.3, 0.33, 0.28],
            duration=3.0,
            translation_phase=[0.3, 1.1, -0.4],
            rotation_phase=[-0.2, 0.5, 0.9],
        )
        worst_p = worst_r = 0.0
        for t0 in np.arange(0.0, 2.5, 0.25):
            t1 = t0 + 0.5
            samples = simulate_imu(traj, rate=200.0, t0=t0, t1=t1)
            pre = ImuPreintegration(samples)
            q1, v1, p1 = rk4_navigation(traj, t0, t1, 600)
            Ri = traj.pose(t0).R
            vi, pi = traj.velocity(t0), traj.position(t0)
            dt = t1 - t0
            dR_gt = Ri.T @ quat_to_matrix(q1)
            dv_gt = Ri.T @ (v1 - vi - GRAVITY_W * dt)
            dp_gt = Ri.T @ (p1 - pi - vi * dt - 0.5 * GRAVITY_W * dt * dt)
            worst_p = max(worst_p, float(np.linalg.norm(pre.delta_p - dp_gt)),
                          float(np.linalg.norm(pre.delta_v - dv_gt)))
            worst_r = max(worst_r, float(np.linalg.norm(so3_log(pre.delta_R.T @ dR_gt))))
        runtime = time.perf_counter() - t_start
        assert worst_p <= 1e-5
        assert worst_r <= 1e-5
        assert runtime < 5.0
        report("criterion 4 (imu oracle)", runtime,
               f"worst pos/vel {worst_p:.2e} m, rot {worst_r:.2e} rad")


class TestCriterion5HybridTracking:
    def test_end_to_end_and_ordering(self, room_dataset):
        cfg, data_dir = room_dataset
        t_start = time.perf_counter()
        data = load_dataset(data_dir)
        gt = load_tum(os.path.join(data_dir, "groundtruth.txt"))

        res_h = run_tracking(cfg, data_dir, dataset=data)
        ate_h, _, _ = ate_rmse(res_h.trajectory, gt)

        cfg_f = PipelineConfig()
        for k, v in vars(cfg).items():
            setattr(cfg_f, k, v)
        cfg_f.tracker_use_direct = False
        res_f = run_tracking(cfg_f, data_dir, dataset=data)
        ate_f, _, _ = ate_rmse(res_f.trajectory, gt)

        length = trajectory_length(gt)
        runtime = time.perf_counter() - t_start
        assert ate_h <= 0.01 * length, f"ATE {ate_h:.4f} m vs 1% of {length:.2f} m"
        assert ate_h <= ate_f + 1e-12, f"hybrid {ate_h:.4f} > feature-only {ate_f:.4f}"
        assert runtime < 300.0
        report("criterion 5 (hybrid tracking)", runtime,
               f"ATE hybrid {100*ate_h:.2f} cm vs feature-only {100*ate_f:.2f} cm "
               f"over {length:.1f} m ({100*ate_h/length:.3f}%)")


class TestCriterion6SpaceSweepEquivalence:
    def test_thousand_random_configs(self):
        t_start = time.perf_counter()
        rng = np.random.default_rng(606)
        f_px = 150.0   # normalized -> pixel conversion for the bound
        worst = 0.0
        done = 0
        while done < 1000:
            T = Pose(quat_exp(rng.normal(size=3) * 0.1), rng.normal(size=3) * 0.15)
            z0 = rng.uniform(0.8, 3.0)
            zi = rng.uniform(0.5, 8.0)
            center = -T.R.T @ T.t
            if abs(z0 - center[2]) < 0.05:
                continue
            x = rng.normal(size=2) * 0.3
            closed = transfer_across_planes(x, z0, zi, center)
            oracle = ray_plane_transfer(x, z0, zi, center)
            try:
                _, H_inv_0 = canonical_homography(T, z0)
                H_i, _ = canonical_homography(T, zi)
            except Exception:
                continue
            chain = H_i @ H_inv_0 @ np.array([x[0], x[1], 1.0])
            if abs(chain[2]) < 1e-9:
                continue
            chain = chain[:2] / chain[2]
            worst = max(worst,
                        float(np.max(np.abs(closed - oracle))) * f_px,
                        float(np.max(np.abs(closed - chain))) * f_px)
            done += 1
        runtime = time.perf_counter() - t_start
        assert worst <= 1e-8
        assert runtime < 5.0
        report("criterion 6 (plane-transfer equivalence)", runtime,
               f"1000 configs, worst dev {worst:.2e} px")


class TestCriterion7SemiDenseDepth:
    def test_plane_sweep_depth(self, sweep_dataset):
        cfg, data_dir = sweep_dataset
        t_start = time.perf_counter()
        data = load_dataset(data_dir)
        gt = load_tum(os.path.join(data_dir, "groundtruth.txt"))
        result = run_mapping(cfg, data_dir, gt, dataset=data)
        assert len(result.products) >= 1
        gt_depths = render_gt_depths_at_rvs(cfg, result.products, data["camera"])
        p = result.products[0]
        gd, gv = gt_depths[0]
        semi = p.semi_dense
        both = semi.valid & gv
        n_inv = (1.0 / cfg.mapping_dsi_near - 1.0 / cfg.mapping_dsi_far) / (
            cfg.mapping_dsi_planes - 1)
        spacing_at_2m = 2.0**2 * n_inv
        err = float(np.mean(np.abs(semi.depth - gd)[both]))
        density = 100.0 * np.count_nonzero(both) / np.count_nonzero(gv)
        runtime = time.perf_counter() - t_start
        assert err <= spacing_at_2m, f"mean |err| {err:.4f} vs spacing {spacing_at_2m:.4f}"
        assert density >= 5.0, f"density {density:.2f}%"
        assert runtime < 60.0
        report("criterion 7 (semi-dense depth)", runtime,
               f"mean |err| {err:.4f} m (plane spacing {spacing_at_2m:.4f}), "
               f"density {density:.1f}%")


class TestCriterion8DenseInpainting:
    def test_two_segment_scene(self, workdir):
        t_start = time.perf_counter()
        cfg = PipelineConfig()
        cfg.sim_duration = 1.0
        cfg.sim_scene = "two_plane"
        cfg.sim_trajectory = "sweep"
        cfg.sim_speed = 0.4
        cfg.sim_render_rate = 250.0
        cfg.sim_threshold = 0.08
        cfg.mapping_rv_translation = 0.5
        cfg.mapping_min_votes = 50.0
        cfg.mapping_vote_ratio = 3.0
        cfg.mapping_segment_tolerance = 0.15
        cfg.mapping_filter_enabled = False   # bound checked on raw inpainting
        data_dir = str(workdir / "two_plane")
        run_simulate(cfg, data_dir)
        data = load_dataset(data_dir)
        gt = load_tum(os.path.join(data_dir, "groundtruth.txt"))
        result = run_mapping(cfg, data_dir, gt, dataset=data)
        p = result.products[0]
        gd, gv = render_gt_depths_at_rvs(cfg, result.products, data["camera"])[0]
        img = p.rv.image.values if hasattr(p.rv.image, "values") else p.rv.image
        seg = region_grow_segment(img, cfg.mapping_segment_tolerance,
                                  cfg.mapping_min_segment_px)
        semi, dense = p.semi_dense, p.dense

        rel_errs, densities = [], []
        for s in range(seg.count):
            m = seg.labels == s
            seeds = semi.valid & m
            if seeds.sum() == 0 or s in (dense.seedless_segments or []):
                continue
            filled = dense.valid & m
            densities.append(100.0 * filled.sum() / m.sum())
            sel = filled & gv
            rel = np.abs(dense.depth - gd)[sel] / gd[sel]
            rel_errs.append(float(rel.mean()))
            # convex-combination bound per segment
            lo = semi.depth[seeds].min()
            hi = semi.depth[seeds].max()
            inpainted = filled & (dense.provenance == 1)
            assert np.all(dense.depth[inpainted] >= lo - 1e-9)
            assert np.all(dense.depth[inpainted] <= hi + 1e-9)
        runtime = time.perf_counter() - t_start
        assert rel_errs, "no seeded segments evaluated"
        worst_rel = max(rel_errs)
        agg = float(np.mean(rel_errs))
        assert agg <= 0.05, f"aggregate relative error {agg:.4f}"
        assert min(densities) >= 100.0 - 1e-9, f"density {min(densities):.2f}%"
        assert runtime < 60.0
        report("criterion 8 (dense inpainting)", runtime,
               f"{len(rel_errs)} seeded segments, mean rel err {100*agg:.2f}% "
               f"(worst {100*worst_rel:.2f}%), density 100%")


class TestCriterion9Tsdf:
    def test_sphere_plane_and_unit_values(self):
        t_start = time.perf_counter()
        # unit values straight from the fusion formulas
        assert point_weight(0.0, 2.0, 0.01) == 0.25
        eps = 0.01
        d_t = 4 * eps
        assert point_weight(-d_t, 1.0, eps) == 0.0
        assert point_weight(-(eps + d_t) / 2, 1.0, eps) == 0.5
        D, W = update_voxel(0.0, 0.0, 0.02, 0.7, d_t=d_t, W_max=100.0)
        assert D == 0.02 and W == 0.7
        D, W = update_voxel(0.02, 1.0, 0.02, 1.0, d_t=d_t, W_max=100.0)
        assert D == 0.02 and W == 2.0

        # analytic sphere fill
        grid = TsdfGrid(0.02)
        c, r = np.zeros(3), 0.5

        def sphere(p):
            return np.linalg.norm(np.asarray(p) - c, axis=-1) - r

        fill_grid_from_sdf(grid, sphere, c - r - 0.1, c + r + 0.1)
        mesh = extract_mesh(grid)
        dist = np.abs(np.linalg.norm(mesh.vertices - c, axis=1) - r)
        sphere_rms = float(np.sqrt(np.mean(dist**2)))
        assert sphere_rms <= grid.eps / 2
        assert float(dist.max()) <= grid.eps

        # integrated plane at eps = 0.01 from 5 views
        cam = CameraModel(fx=240.0, fy=240.0, cx=80.0, cy=60.0, width=160, height=120)
        from evslam.synthetic import SceneModel, TexturedPlane, uniform_texture

        plane_z = 1.5
        scene = SceneModel([TexturedPlane([0, 0, plane_z], [1, 0, 0], [0, 1, 0],
                                          3.0, 3.0, uniform_texture(0.5))])
        grid2 = TsdfGrid(0.01)
        rng = np.random.default_rng(909)
        for _ in range(5):
            pose = Pose(quat_exp(rng.normal(size=3) * 0.015), rng.normal(size=3) * 0.04)
            dm = ground_truth_depth(scene, pose, cam)
            integrate_depth_map(grid2, dm.depth, dm.valid, pose, cam)
        columns = {}
        for key, blk in grid2.blocks.items():
            occ = np.argwhere(blk["W"] > 0)
            for (li, lj, lk) in occ:
                gi, gj, gk = key[0] * 8 + li, key[1] * 8 + lj, key[2] * 8 + lk
                columns.setdefault((gi, gj), []).append(
                    ((gk + 0.5) * grid2.eps, blk["D"][li, lj, lk]))
        crossings = []
        for col in columns.values():
            col.sort()
            for (z0, d0), (z1, d1) in zip(col[:-1], col[1:]):
                if abs(z1 - z0 - grid2.eps) < 1e-9 and d0 > 0 >= d1:
                    crossings.append(z0 + (z1 - z0) * d0 / (d0 - d1))
        crossings = np.array(crossings)
        assert len(crossings) >= 100
        worst_cross = float(np.max(np.abs(crossings - plane_z)))
        assert worst_cross <= grid2.eps

        mesh2 = extract_mesh(grid2)
        assert len(mesh2.triangles) > 50
        normals = mesh2.triangle_normals()
        ang = np.degrees(np.arccos(np.clip(np.abs(normals[:, 2]), -1, 1)))
        worst_ang = float(ang.max())
        assert worst_ang <= 2.0
        runtime = time.perf_counter() - t_start
        assert runtime < 60.0
        report("criterion 9 (tsdf/mesh)", runtime,
               f"sphere RMS {sphere_rms:.4f} m (eps/2 = {grid.eps/2}), plane "
               f"crossing worst {worst_cross*1000:.2f} mm, normal worst {worst_ang:.2f} deg")


class TestCriterion10MetricProtocol:
    def test_ate_and_depth_protocol(self):
        t_start = time.perf_counter()
        rng = np.random.default_rng(1010)
        n = 1500
        ts = np.arange(n) * 0.01
        poses = [(t, Pose(quat_exp(rng.normal(size=3) * 0.1),
                          np.array([np.sin(t), np.cos(0.7 * t), 0.1 * t])))
                 for t in ts]
        ate0, _, _ = ate_rmse(poses, poses)
        assert ate0 < 1e-12

        G = Pose(quat_exp([0.3, -0.2, 0.9]), [5.0, -2.0, 1.0])
        moved = [(t, G @ p) for t, p in poses]
        ate_rigid, _, _ = ate_rmse(moved, poses)
        assert ate_rigid < 1e-9

        sigma = 0.01
        noisy = [(t, Pose(p.q, p.t + rng.normal(size=3) * sigma)) for t, p in poses]
        ate_noise, _, _ = ate_rmse(noisy, poses)
        expected = np.sqrt(3) * sigma
        assert abs(ate_noise - expected) <= 0.1 * expected

        # depth protocol: failures count as zero depth (full-depth error)
        gt_depth = np.full((40, 50), 2.0)
        gt_valid = np.ones((40, 50), dtype=bool)
        est_depth = np.full((40, 50), 2.0)
        est_valid = np.ones((40, 50), dtype=bool)
        est_valid[:, 25:] = False               # half the image unrecovered
        err, density = depth_metrics(est_depth, est_valid, gt_depth, gt_valid)
        assert abs(err - 1.0) < 1e-12           # half zeros -> mean err = 1.0 m
        assert abs(density - 50.0) < 1e-12
        runtime = time.perf_counter() - t_start
        assert runtime < 5.0
        report("criterion 10 (metric protocol)", runtime,
               f"noise ATE {100*ate_noise:.3f} cm vs sqrt(3) cm, "
               f"zero-fill err 1.0 m at 50% density")


class TestCriterion11Determinism:
    def test_slam_equals_tracking_and_reruns_hash_identical(self, workdir):
        import filecmp
        import hashlib

        t_start = time.perf_counter()
        cfg = PipelineConfig()
        cfg.sim_duration = 1.2
        cfg.sim_scene = "checker_room"
        cfg.sim_trajectory = "wiggle"
        cfg.sim_speed = 0.35
        cfg.mapping_rv_translation = 0.10
        cfg.mapping_dsi_planes = 50
        cfg.mapping_max_rv = 3
        data_dir = str(workdir / "determinism")
        run_simulate(cfg, data_dir)
        data = load_dataset(data_dir)

        out_a = str(workdir / "slam_a")
        out_b = str(workdir / "slam_b")
        out_t = str(workdir / "track_only")
        tr_a, mp_a = run_slam(cfg, data_dir, out_dir=out_a, dataset=data)
        tr_b, mp_b = run_slam(cfg, data_dir, out_dir=out_b, dataset=data)
        tr_t = run_tracking(cfg, data_dir, out_dir=out_t, dataset=data)

        # one-way dataflow: slam trajectory is bit-identical to tracking-only
        assert filecmp.cmp(os.path.join(out_a, "trajectory.txt"),
                           os.path.join(out_t, "trajectory.txt"), shallow=False)
        assert len(tr_a.trajectory) == len(tr_t.trajectory)
        for (ta, pa), (tt, pt) in zip(tr_a.trajectory, tr_t.trajectory):
            assert ta == tt
            assert np.array_equal(pa.t, pt.t) and np.array_equal(pa.q, pt.q)
        assert len(mp_a.products) == len(mp_b.products)

        def hash_dir(d):
            h = hashlib.sha256()
            for name in sorted(os.listdir(d)):
                h.update(name.encode())
                with open(os.path.join(d, name), "rb") as f:
                    h.update(f.read())
            return h.hexdigest()

        ha, hb = hash_dir(out_a), hash_dir(out_b)
        assert ha == hb, "rerun artifacts differ"
        runtime = time.perf_counter() - t_start
        assert runtime < 300.0
        report("criterion 11 (determinism & dataflow)", runtime,
               f"{len(tr_a.trajectory)} poses, {len(mp_a.products)} RVs, "
               f"artifact hash {ha[:12]}")
