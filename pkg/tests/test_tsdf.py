import numpy as np
import pytest

from evslam.camera import CameraModel
from evslam.geometry import Pose, quat_exp
from evslam.tsdf import (
    Mesh,
    TsdfGrid,
    extract_mesh,
    fill_grid_from_sdf,
    integrate_depth_map,
    point_weight,
    signed_distance,
    update_voxel,
)

CAM = CameraModel(fx=80.0, fy=80.0, cx=32.0, cy=24.0, width=64, height=48)


class TestSignedDistance:
    def test_voxel_in_front_positive(self):
        O = np.zeros(3)
        P = np.array([0.0, 0.0, 1.0])
        V = np.array([0.0, 0.0, 0.5])
        assert signed_distance(V, P, O) == pytest.approx(0.5)

    def test_voxel_behind_negative(self):
        O = np.zeros(3)
        P = np.array([0.0, 0.0, 1.0])
        V = np.array([0.0, 0.0, 1.2])
        assert signed_distance(V, P, O) == pytest.approx(-0.2)

    def test_voxel_at_point_zero(self):
        O = np.zeros(3)
        P = np.array([0.3, 0.2, 1.0])
        assert signed_distance(P, P, O) == 0.0

    def test_degenerate_ray_rejected(self):
        with pytest.raises(ValueError):
            signed_distance([0, 0, 0.5], [0, 0, 1.0], [0, 0, 1.0])


class TestPointWeight:
    def test_front_branch(self):
        assert point_weight(0.0, 2.0, 0.01) == pytest.approx(0.25)
        assert point_weight(1.0, 2.0, 0.01) == pytest.approx(0.25)

    def test_zero_past_truncation(self):
        eps = 0.01
        assert point_weight(-4 * eps - 1e-9, 1.0, eps) == 0.0

    def test_ramp_boundary_values(self):
        eps = 0.01
        d_t = 4 * eps
        assert point_weight(-d_t, 1.0, eps) == pytest.approx(0.0)
        # ramp midpoint: d = -(eps + d_t)/2 gives (d + d_t)/(d_t - eps) = 1/2
        assert point_weight(-(eps + d_t) / 2, 1.0, eps) == pytest.approx(0.5)

    def test_rho_scaling(self):
        assert point_weight(0.0, 3.0, 0.01) == pytest.approx(1.0 / 9.0)
        with pytest.raises(ValueError):
            point_weight(0.0, 0.0, 0.01)


class TestUpdateVoxel:
    def test_first_observation(self):
        D, W = update_voxel(0.0, 0.0, 0.02, 0.5, d_t=0.04, W_max=100.0)
        assert D == pytest.approx(0.02)
        assert W == pytest.approx(0.5)

    def test_equal_repeats_keep_value(self):
        D, W = update_voxel(0.02, 1.0, 0.02, 1.0, d_t=0.04, W_max=100.0)
        assert D == pytest.approx(0.02)
        assert W == pytest.approx(2.0)

    def test_cap_limits_weight_not_blending(self):
        W_max = 10.0
        D, W = update_voxel(0.04, W_max, -0.04, 5.0, d_t=0.04, W_max=W_max)
        assert D == pytest.approx((W_max * 0.04 + 5.0 * (-0.04)) / (W_max + 5.0))
        assert W == W_max

    def test_clamps_d_to_band(self):
        D, W = update_voxel(0.0, 0.0, 10.0, 1.0, d_t=0.04, W_max=100.0)
        assert D == pytest.approx(0.04)

    def test_zero_total_weight_noop(self):
        D, W = update_voxel(0.01, 0.0, 0.03, 0.0, d_t=0.04, W_max=100.0)
        assert D == 0.01 and W == 0.0

    def test_order_commutative_below_cap(self):
        rng = np.random.default_rng(0)
        obs = [(rng.uniform(-0.04, 0.04), rng.uniform(0.1, 1.0)) for _ in range(12)]
        def run(seq):
            D, W = 0.0, 0.0
            for d, w in seq:
                D, W = update_voxel(D, W, d, w, d_t=0.04, W_max=1e9)
            return D, W
        D1, W1 = run(obs)
        D2, W2 = run(list(reversed(obs)))
        assert D1 == pytest.approx(D2, abs=1e-12)
        assert W1 == pytest.approx(W2, abs=1e-12)


class TestIntegrate:
    def frontal_depth(self, z=2.0):
        depth = np.full((CAM.height, CAM.width), z)
        valid = np.ones((CAM.height, CAM.width), dtype=bool)
        return depth, valid

    def test_empty_depth_map_no_change(self):
        grid = TsdfGrid(0.05)
        depth = np.zeros((CAM.height, CAM.width))
        valid = np.zeros((CAM.height, CAM.width), dtype=bool)
        integrate_depth_map(grid, depth, valid, Pose.identity(), CAM)
        assert len(grid.blocks) == 0

    def test_one_ray_per_voxel_group(self):
        grid = TsdfGrid(0.5)   # coarse: many pixels share a voxel
        depth, valid = self.frontal_depth(2.0)
        integrate_depth_map(grid, depth, valid, Pose.identity(), CAM)
        pts = CAM.back_project(
            np.stack(np.meshgrid(np.arange(CAM.width, dtype=float),
                                 np.arange(CAM.height, dtype=float)), axis=-1).reshape(-1, 2),
            1.0 / 2.0,
        )
        n_groups = len(np.unique(np.floor(pts / grid.eps).astype(int), axis=0))
        assert grid.rays_cast == n_groups
        assert grid.rays_cast < valid.sum()

    def test_plane_zero_crossing_from_five_views(self):
        eps = 0.01
        grid = TsdfGrid(eps)
        rng = np.random.default_rng(1)
        from evslam.synthetic import SceneModel, TexturedPlane, ground_truth_depth, uniform_texture

        plane = TexturedPlane([0, 0, 2.0], [1, 0, 0], [0, 1, 0], 3.0, 3.0,
                              uniform_texture(0.5))
        scene = SceneModel([plane])
        for k in range(5):
            pose = Pose(quat_exp(rng.normal(size=3) * 0.02),
                        rng.normal(size=3) * 0.05)
            dm = ground_truth_depth(scene, pose, CAM)
            integrate_depth_map(grid, dm.depth, dm.valid, pose, CAM)
        # oblique rays cover each voxel column only partially, so collect the
        # zero crossing from every column that holds a consecutive sign pair
        columns = {}
        for key, blk in grid.blocks.items():
            occ = np.argwhere(blk["W"] > 0)
            for (li, lj, lk) in occ:
                gi = key[0] * 8 + li
                gj = key[1] * 8 + lj
                gk = key[2] * 8 + lk
                columns.setdefault((gi, gj), []).append(
                    ((gk + 0.5) * eps, blk["D"][li, lj, lk])
                )
        crossings = []
        for col in columns.values():
            col.sort()
            for (z0, d0), (z1, d1) in zip(col[:-1], col[1:]):
                if abs(z1 - z0 - eps) < 1e-9 and d0 > 0 >= d1:
                    crossings.append(z0 + (z1 - z0) * d0 / (d0 - d1))
        crossings = np.array(crossings)
        assert len(crossings) >= 20
        assert np.max(np.abs(crossings - 2.0)) <= eps

    def test_weights_never_decrease(self):
        grid = TsdfGrid(0.02)
        depth, valid = self.frontal_depth(1.0)
        integrate_depth_map(grid, depth, valid, Pose.identity(), CAM)
        w_first = {k: b["W"].copy() for k, b in grid.blocks.items()}
        integrate_depth_map(grid, depth, valid, Pose.identity(), CAM)
        for k, w0 in w_first.items():
            assert np.all(grid.blocks[k]["W"] >= w0 - 1e-12)

    def test_full_ray_update_reaches_free_space(self):
        eps = 0.05
        band = TsdfGrid(eps)
        full = TsdfGrid(eps)
        depth, valid = self.frontal_depth(2.0)
        integrate_depth_map(band, depth, valid, Pose.identity(), CAM)
        integrate_depth_map(full, depth, valid, Pose.identity(), CAM,
                            full_ray_update=True)
        near_idx = band.voxel_index([0.0, 0.0, 0.5])
        _, w_band, _ = band.read(near_idx)
        _, w_full, _ = full.read(near_idx)
        assert w_band == 0.0
        assert w_full > 0.0

    def test_block_sparsity(self):
        grid = TsdfGrid(0.01)
        depth, valid = self.frontal_depth(2.0)
        integrate_depth_map(grid, depth, valid, Pose.identity(), CAM)
        # untouched space (behind the camera) has no blocks
        for key in grid.blocks:
            assert key[2] * 8 * grid.eps > -0.2


class TestMesh:
    def sphere_sdf(self, center, radius):
        center = np.asarray(center)

        def sdf(p):
            return np.linalg.norm(np.asarray(p) - center, axis=-1) - radius

        return sdf

    def test_sphere_mesh_accuracy(self):
        eps = 0.02
        grid = TsdfGrid(eps)
        c, r = np.array([0.0, 0.0, 0.0]), 0.5
        fill_grid_from_sdf(grid, self.sphere_sdf(c, r), c - r - 0.1, c + r + 0.1)
        mesh = extract_mesh(grid)
        assert len(mesh.vertices) > 100
        dist = np.abs(np.linalg.norm(mesh.vertices - c, axis=1) - r)
        assert np.sqrt(np.mean(dist**2)) <= eps / 2
        assert np.max(dist) <= eps

    def test_all_positive_no_mesh(self):
        grid = TsdfGrid(0.02)
        fill_grid_from_sdf(grid, lambda p: np.full(np.asarray(p).shape[:-1], 0.03),
                           [-0.1, -0.1, -0.1], [0.1, 0.1, 0.1])
        mesh = extract_mesh(grid)
        assert len(mesh.vertices) == 0 and len(mesh.triangles) == 0

    def test_plane_sdf_normals_and_linear_exactness(self):
        eps = 0.02
        grid = TsdfGrid(eps)
        n = np.array([0.3, -0.2, 0.93])
        n = n / np.linalg.norm(n)
        d0 = 0.31

        def sdf(p):
            return np.asarray(p) @ n - d0

        fill_grid_from_sdf(grid, sdf, [-0.3, -0.3, 0.0], [0.5, 0.5, 0.7])
        mesh = extract_mesh(grid)
        assert len(mesh.triangles) > 10
        # linear SDF: interpolated vertices lie exactly on the plane
        res = np.abs(mesh.vertices @ n - d0)
        assert np.max(res) < 1e-9
        normals = mesh.triangle_normals()
        ang = np.degrees(np.arccos(np.clip(np.abs(normals @ n), -1, 1)))
        assert np.max(ang) <= 2.0

    def test_zero_weight_corner_skipped(self):
        eps = 0.05
        grid = TsdfGrid(eps)
        n = np.array([0.0, 0.0, 1.0])

        def sdf(p):
            return np.asarray(p)[..., 2] - 0.11

        fill_grid_from_sdf(grid, sdf, [0.0, 0.0, 0.0], [0.4, 0.4, 0.3])
        full_mesh = extract_mesh(grid)
        # knock one corner's weight out: cubes using it disappear
        idx = grid.voxel_index([0.22, 0.22, 0.12])
        key = tuple(int(v) for v in idx // 8)
        loc = tuple(int(v) for v in idx % 8)
        grid.blocks[key]["W"][loc] = 0.0
        pruned = extract_mesh(grid)
        assert len(pruned.triangles) < len(full_mesh.triangles)

    def test_no_degenerate_triangles(self):
        eps = 0.02
        grid = TsdfGrid(eps)
        fill_grid_from_sdf(grid, self.sphere_sdf([0, 0, 0], 0.3),
                           [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
        mesh = extract_mesh(grid)
        a = mesh.vertices[mesh.triangles[:, 0]]
        b = mesh.vertices[mesh.triangles[:, 1]]
        c = mesh.vertices[mesh.triangles[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        assert np.all(areas > 0)

    def test_vertex_indices_in_range(self):
        grid = TsdfGrid(0.03)
        fill_grid_from_sdf(grid, self.sphere_sdf([0, 0, 0], 0.3),
                           [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
        mesh = extract_mesh(grid)
        assert mesh.triangles.min() >= 0
        assert mesh.triangles.max() < len(mesh.vertices)
        assert len(mesh.colors) == len(mesh.vertices)
