"""Top-level runs: simulate, track, map, and the two-thread slam loop.

Dataflow is strictly one-way: tracking publishes immutable (t, pose)
snapshots over a bounded queue; mapping consumes them and never feeds
anything back, so `slam` produces the identical trajectory to `track`.
"""

from __future__ import annotations

import os
import queue
import threading

import numpy as np

from .camera import CameraModel
from .config import PipelineConfig
from .dataio import (
    load_dataset,
    save_cloud_ply,
    save_mesh_obj,
    save_mesh_ply,
    save_tum,
    write_dataset,
)
from .evaluate import MetricsReport, ate_rmse, trajectory_length
from .geometry import Pose
from .mapper import MappingEngine, MappingResult
from .synthetic import (
    ImuNoise,
    generate_events,
    ground_truth_depth,
    parse_scene_file,
    preset_scene,
    preset_trajectory,
    render_intensity,
    simulate_imu,
)
from .tracker import Tracker, TrackerResult


def _unit_or_zero(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else v


def _resolve_scene(cfg: PipelineConfig):
    if os.path.exists(cfg.sim_scene):
        return parse_scene_file(cfg.sim_scene)
    return preset_scene(cfg.sim_scene)


def run_simulate(cfg: PipelineConfig, out_dir: str):
    """Generate a complete synthetic dataset in the pipeline's disk layout."""
    scene = _resolve_scene(cfg)
    traj = preset_trajectory(cfg.sim_trajectory, cfg.sim_duration, cfg.sim_speed)
    camera = CameraModel(fx=cfg.sim_fx, fy=cfg.sim_fy, cx=cfg.sim_cx, cy=cfg.sim_cy,
                         width=cfg.sim_width, height=cfg.sim_height)
    extrinsic = Pose.identity()

    events = generate_events(
        scene, traj, camera, threshold=cfg.sim_threshold, rate=cfg.sim_render_rate,
        timestamp_jitter=cfg.sim_timestamp_jitter,
        threshold_jitter=cfg.sim_threshold_jitter, seed=cfg.run_seed,
        supersample=cfg.sim_supersample,
    )
    n_frames = int(cfg.sim_duration * cfg.sim_frame_rate) + 1
    frame_times = np.arange(n_frames) / cfg.sim_frame_rate
    frames = [render_intensity(scene, traj.pose(t) @ extrinsic, camera,
                               supersample=cfg.sim_supersample).values
              for t in frame_times]
    rng = np.random.default_rng(cfg.run_seed + 12345)
    gyro_bias = cfg.sim_imu_gyro_bias * _unit_or_zero(rng.standard_normal(3))
    accel_bias = cfg.sim_imu_accel_bias * _unit_or_zero(rng.standard_normal(3))
    noise = ImuNoise(gyro_sigma=cfg.sim_imu_gyro_noise,
                     accel_sigma=cfg.sim_imu_accel_noise,
                     gyro_bias=gyro_bias, accel_bias=accel_bias)
    imu = simulate_imu(traj, rate=cfg.sim_imu_rate, gravity=cfg.gravity(),
                       noise=noise, seed=cfg.run_seed)
    gt_rate = 100.0
    gt = [(t, traj.pose(t)) for t in np.arange(0.0, cfg.sim_duration + 1e-9, 1.0 / gt_rate)]
    write_dataset(out_dir, events, frames, frame_times, imu, gt, camera, extrinsic)
    return {"events": len(events), "frames": n_frames, "imu": len(imu)}


def run_tracking(cfg: PipelineConfig, dataset_dir: str, out_dir: str = None,
                 dataset=None, publish=None) -> TrackerResult:
    """Stream the dataset through the hybrid tracker; write trajectory.txt."""
    data = dataset or load_dataset(dataset_dir)
    if len(data["events"]) == 0:
        raise ValueError(f"dataset under {dataset_dir} has an empty event stream")
    tracker = Tracker(
        cfg, data["camera"], data["extrinsic"], data["events"], data["frames"],
        data["imu"], groundtruth=data["groundtruth"], publish=publish,
    )
    result = tracker.run()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_tum(os.path.join(out_dir, "trajectory.txt"), result.trajectory)
        if cfg.tracker_emit_mat_rate_poses:
            save_tum(os.path.join(out_dir, "trajectory_mat_rate.txt"),
                     result.mat_rate_poses)
    return result


def run_mapping(cfg: PipelineConfig, dataset_dir: str, trajectory,
                out_dir: str = None, dataset=None) -> MappingResult:
    """Batch mapping over a known trajectory ([(t, body Pose)])."""
    data = dataset or load_dataset(dataset_dir)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    engine = MappingEngine(cfg, data["camera"], data["extrinsic"], data["events"],
                           data["frames"], out_dir=out_dir)
    for t, pose in trajectory:
        engine.feed(t, pose)
    result = engine.finish()
    if out_dir is not None:
        _write_map_artifacts(result, out_dir)
    return result


def _write_map_artifacts(result: MappingResult, out_dir: str):
    pts = [p.cloud_points for p in result.products if len(p.cloud_points)]
    inten = [p.cloud_intensity for p in result.products if len(p.cloud_intensity)]
    if pts:
        save_cloud_ply(os.path.join(out_dir, "cloud.ply"),
                       np.vstack(pts), np.concatenate(inten))
    save_mesh_ply(os.path.join(out_dir, "mesh.ply"), result.mesh)
    save_mesh_obj(os.path.join(out_dir, "mesh.obj"), result.mesh)


def run_slam(cfg: PipelineConfig, dataset_dir: str, out_dir: str = None,
             dataset=None):
    """Tracking and mapping in two threads bridged by a bounded pose queue."""
    data = dataset or load_dataset(dataset_dir)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    engine = MappingEngine(cfg, data["camera"], data["extrinsic"], data["events"],
                           data["frames"], out_dir=out_dir)
    pose_queue: queue.Queue = queue.Queue(maxsize=cfg.run_queue_depth)
    mapping_error = []

    def mapping_worker():
        while True:
            item = pose_queue.get()
            if item is None:
                break
            try:
                engine.feed(*item)
            except Exception as exc:   # pragma: no cover - surfaced on join
                mapping_error.append(exc)
                break

    worker = threading.Thread(target=mapping_worker, name="mapping")
    worker.start()

    def publish(t, pose):
        pose_queue.put((t, pose))   # blocks when the queue is full

    try:
        track_result = run_tracking(cfg, dataset_dir, out_dir=out_dir,
                                    dataset=data, publish=publish)
    finally:
        pose_queue.put(None)        # drain sentinel
        worker.join()
    if mapping_error:
        raise mapping_error[0]
    map_result = engine.finish()
    if out_dir is not None:
        _write_map_artifacts(map_result, out_dir)
    return track_result, map_result


def evaluate_run(est_trajectory, gt_trajectory, est_depths=None, gt_depths=None,
                 timer_summaries=None, max_dt: float = 0.010) -> MetricsReport:
    """Assemble the metrics report from trajectories and optional depth pairs.

    est_depths / gt_depths: matched lists of (depth, valid) arrays.
    """
    from .evaluate import depth_metrics

    report = MetricsReport()
    if est_trajectory and gt_trajectory:
        ate, _, _ = ate_rmse(est_trajectory, gt_trajectory, max_dt)
        report.ate_m = ate
        report.trajectory_length_m = trajectory_length(gt_trajectory)
    if est_depths and gt_depths:
        errs, dens = [], []
        for (ed, ev), (gd, gv) in zip(est_depths, gt_depths):
            e, d = depth_metrics(ed, ev, gd, gv)
            errs.append(e)
            dens.append(d)
        report.mean_depth_error_m = float(np.mean(errs))
        report.density_percent = float(np.mean(dens))
    if timer_summaries:
        merged = {}
        for summary in timer_summaries:
            merged.update(summary)
        report.timings_ms = merged
    return report


def render_gt_depths_at_rvs(cfg: PipelineConfig, products, camera: CameraModel):
    """Ground-truth depth maps at each RV pose for synthetic evaluation."""
    scene = _resolve_scene(cfg)
    out = []
    for p in products:
        dm = ground_truth_depth(scene, p.rv.pose, camera)
        out.append((dm.depth, dm.valid))
    return out
