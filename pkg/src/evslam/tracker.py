"""Hybrid tracking thread: event-corner + image-corner front ends, per-mat
direct alignment, and the sliding-window optimizer.

Processing is clocked by the event-mat grid. Every mat step the tracker
updates the time surface, tracks event corners, and aligns the previous mat
to the current one; at frame timestamps it also tracks image corners and
evaluates the keyframe policy. Each new keyframe brings IMU preintegration,
feature observations, triangulation, the composed relative-pose factor,
a window optimization, and (when full) marginalization of the oldest state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backend import (
    Keyframe,
    RelativePoseFactor,
    SlidingWindow,
    WindowOptions,
    hybrid_optimize,
    marginalize_oldest,
)
from .camera import CameraModel
from .config import PipelineConfig
from .direct_align import AlignOptions, DegenerateInputError, align_event_mats
from .events import EventStream, build_event_mat, build_time_surface
from .evaluate import StageTimer
from .frontend import (
    FeatureTrack,
    InsufficientBaselineError,
    TriangulationRejected,
    _build_pyramid,
    detect_corners,
    detect_event_corners,
    track_points,
)
from .geometry import Pose, PoseBuffer
from .imu import ImuPreintegration, ImuSample, NavState, dead_reckon, slice_samples


@dataclass
class _LiveFeature:
    track: FeatureTrack
    px: np.ndarray
    px_at_kf: np.ndarray
    anchor_kf: int = 0            # keyframe whose template this feature matches
    anchor_px: np.ndarray = None  # position in the anchor template
    alive: bool = True


@dataclass
class TrackerResult:
    trajectory: list                    # [(t, Pose)] keyframe body poses
    mat_rate_poses: list                # optional densified poses
    keyframe_count: int = 0
    timer: Optional[StageTimer] = None


class Tracker:
    def __init__(self, config: PipelineConfig, camera: CameraModel, extrinsic: Pose,
                 events: EventStream, frames, imu, groundtruth=None,
                 publish: Optional[Callable] = None):
        self.cfg = config
        self.camera = camera
        self.extrinsic = extrinsic
        self.events = events
        self.frames = frames                    # [(t, image)]
        self.imu = imu
        self.groundtruth = groundtruth          # [(t, Pose)] or None
        self.publish = publish
        self.timer = StageTimer()

        self.window = SlidingWindow(WindowOptions(
            max_keyframes=config.tracker_window_size,
            max_iterations=config.tracker_max_iterations,
            huber_delta_px=config.tracker_huber_px,
            event_sigma_px=config.tracker_event_sigma_px,
            image_sigma_px=config.tracker_image_sigma_px,
            use_relative_pose=config.tracker_use_direct,
            marginalize_relative_pose=config.tracker_marginalize_direct,
            use_imu=config.tracker_use_imu,
            bias_prior_gyro=config.tracker_bias_prior_gyro,
            bias_prior_accel=config.tracker_bias_prior_accel,
            gravity=config.gravity(),
        ))
        self.align_opts = AlignOptions(
            smoothing_sigma=config.align_sigma_px,
            pyramid_levels=config.align_pyramid_levels,
            min_active_pixels=config.align_min_active,
            max_iterations=config.align_max_iterations,
            information_trace=config.align_information_trace,
            trust_translation=config.align_trust_translation,
            trust_rotation=config.align_trust_rotation,
        )
        self.event_feats: list[_LiveFeature] = []
        self.image_feats: list[_LiveFeature] = []
        self.next_track_id = 0
        self.kf_index = -1
        self.kf_times: dict[int, float] = {}
        self.frozen_poses: list = []            # [(t, Pose)] from marginalized kfs
        self.mat_rate_poses: list = []
        self.last_kf_state: Optional[NavState] = None
        self.chain_delta = Pose.identity()
        self.chain_infos: list = []
        self.chain_ok = True
        self.chain_steps = 0
        self.pred_prev: Optional[NavState] = None   # IMU-propagated mat-rate state
        # anchor templates (image pyramids) per keyframe: tracking always
        # matches against the fixed anchor patch, never a sliding template,
        # so template-update drift cannot accumulate
        self.ts_templates: dict[int, list] = {}
        self.img_templates: dict[int, list] = {}
        self.kf_mats: dict[int, object] = {}     # event mat ending at each keyframe

    # -- helpers -------------------------------------------------------------

    def _new_track(self, px, kf_index, source) -> _LiveFeature:
        track = FeatureTrack(id=self.next_track_id, source=source)
        self.next_track_id += 1
        track.add_observation(kf_index, px)
        self.window.add_track(track)
        p = np.asarray(px, dtype=float)
        return _LiveFeature(track=track, px=p.copy(), px_at_kf=p.copy(),
                            anchor_kf=kf_index, anchor_px=p.copy())

    def _nominal_inverse_depth(self) -> float:
        lams = [f.track.inverse_depth for f in self.event_feats
                if f.alive and f.track.inverse_depth is not None]
        if lams:
            return float(np.median(lams))
        return self.cfg.tracker_fallback_inverse_depth

    def _gt_buffer(self) -> PoseBuffer:
        buf = PoseBuffer()
        for t, pose in self.groundtruth:
            buf.append(t, pose)
        return buf

    def _state_from_gt(self, t: float) -> NavState:
        buf = self._gt_buffer()
        pose = buf.pose_at(t)
        dt = 0.005
        t0 = max(t - dt, self.groundtruth[0][0])
        t1 = min(t + dt, self.groundtruth[-1][0])
        v = (buf.pose_at(t1).t - buf.pose_at(t0).t) / max(t1 - t0, 1e-9)
        return NavState(p=pose.t, q=pose.q, v=v, t=t)

    def _state_from_imu_alignment(self, t: float) -> NavState:
        """Quasi-static bootstrap: gravity direction from early accel mean,
        gyro bias from the early gyro mean, origin at zero."""
        span = [s for s in self.imu if s.t <= self.imu[0].t + 0.3]
        f_mean = np.mean([s.accel for s in span], axis=0)
        bg = np.mean([s.gyro for s in span], axis=0)
        g_world = self.cfg.gravity()
        up_body = f_mean / max(np.linalg.norm(f_mean), 1e-9)
        up_world = -g_world / np.linalg.norm(g_world)
        # rotation bringing body "up" onto world "up" (yaw unobservable: 0)
        v = np.cross(up_body, up_world)
        c = float(np.dot(up_body, up_world))
        if np.linalg.norm(v) < 1e-12:
            R0 = np.eye(3) if c > 0 else -np.eye(3)
        else:
            from .geometry import so3_exp
            axis = v / np.linalg.norm(v)
            R0 = so3_exp(axis * np.arccos(np.clip(c, -1, 1)))
        from .geometry import matrix_to_quat
        return NavState(p=np.zeros(3), q=matrix_to_quat(R0), v=np.zeros(3),
                        bg=bg, t=t)

    # -- keyframe creation -----------------------------------------------------

    def _make_keyframe(self, t: float, at_frame_image):
        cfg = self.cfg
        self.kf_index += 1
        idx = self.kf_index

        if idx == 0:
            if cfg.tracker_bootstrap == "groundtruth" and self.groundtruth:
                state = self._state_from_gt(t)
                bias_weight = 1e6     # bootstrap biases are known exactly
            else:
                state = self._state_from_imu_alignment(t)
                bias_weight = 1e4     # estimated from the quasi-static span
            self.window.add_keyframe(Keyframe(index=idx, state=state))
            self.window.set_gauge_prior(idx, bias_weight=bias_weight)
        else:
            seg = slice_samples(self.imu, self.last_kf_state.t, t)
            pre = ImuPreintegration(seg, bias_gyro=self.last_kf_state.bg,
                                    bias_accel=self.last_kf_state.ba,
                                    gyro_sigma=cfg.tracker_gyro_sigma,
                                    accel_sigma=cfg.tracker_accel_sigma)
            guess = dead_reckon(seg, self.last_kf_state)[-1]
            if cfg.tracker_bootstrap == "groundtruth" and self.groundtruth and idx == 1:
                guess = self._state_from_gt(t)
                guess.bg = self.last_kf_state.bg.copy()
                guess.ba = self.last_kf_state.ba.copy()
            self.window.add_keyframe(Keyframe(index=idx, state=guess), preintegration=pre)
            if (cfg.tracker_use_direct and cfg.tracker_direct_short_factors
                    and self.chain_steps > 0 and self.chain_ok
                    and self.chain_infos):
                info = np.mean(self.chain_infos, axis=0) / max(self.chain_steps, 1)
                self.window.add_relative_pose_factor(RelativePoseFactor(
                    i=idx - 1, k=idx, delta_T=self.chain_delta, information=info,
                ))
        self.kf_times[idx] = t
        self.chain_delta = Pose.identity()
        self.chain_infos = []
        self.chain_ok = True
        self.chain_steps = 0
        self.pred_prev = self.window.keyframe(idx).state.copy()

        # long-baseline direct factor: aligning mats several keyframes apart
        # turns the alignment's fixed noise floor into a usable velocity
        # constraint during feature-poor stretches
        span = cfg.tracker_direct_span
        if (cfg.tracker_use_direct and span > 0 and idx - span in self.kf_mats
                and idx in self.kf_mats and self.window.has_keyframe(idx - span)):
            Ti = self.window.keyframe(idx - span).state.pose()
            Tk = self.window.keyframe(idx).state.pose()
            init = (Ti.inverse() @ Tk).inverse()
            try:
                res = align_event_mats(
                    self.kf_mats[idx - span], self.kf_mats[idx], init,
                    self.camera, self._nominal_inverse_depth(),
                    opts=self.align_opts, extrinsic=self.extrinsic,
                )
                if res.converged:
                    self.window.add_relative_pose_factor(RelativePoseFactor(
                        i=idx - span, k=idx, delta_T=res.delta_T,
                        information=res.information,
                    ))
            except DegenerateInputError:
                pass

        # record observations of live features at this keyframe
        for f in self.event_feats:
            if f.alive:
                f.track.add_observation(idx, f.px)
                f.px_at_kf = f.px.copy()
        if at_frame_image is not None:
            for f in self.image_feats:
                if f.alive:
                    f.track.add_observation(idx, f.px)
                    f.px_at_kf = f.px.copy()

        # triangulate pending tracks against current window poses
        poses = self.window.poses()
        for f in self.event_feats + self.image_feats:
            tr = f.track
            if not f.alive or tr.inverse_depth is not None:
                continue
            if len([o for o in tr.observations if o[0] in poses]) < 2:
                continue
            try:
                from .frontend import triangulate

                tr.inverse_depth = triangulate(
                    tr, poses, self.camera, self.extrinsic,
                    min_baseline=self.cfg.tracker_min_baseline,
                    max_reprojection_px=self.cfg.tracker_max_reproj_px,
                )
            except InsufficientBaselineError:
                pass
            except TriangulationRejected:
                f.alive = False
                self.window.tracks.pop(tr.id, None)

        self.last_kf_state = self.window.keyframe(idx).state

        if self.window.size >= 2:
            t0 = time.perf_counter()
            hybrid_optimize(self.window, self.camera, self.extrinsic)
            self._gate_outlier_tracks()
            self.timer.add("optimize", time.perf_counter() - t0)
            self.last_kf_state = self.window.keyframe(idx).state

        if self.window.full:
            oldest = self.window.keyframes[0]
            self.frozen_poses.append((self.kf_times[oldest.index],
                                      oldest.state.pose()))
            t0 = time.perf_counter()
            marginalize_oldest(self.window, self.camera, self.extrinsic)
            self.timer.add("marginalize", time.perf_counter() - t0)
            for f in self.event_feats + self.image_feats:
                if f.alive and f.track.id not in self.window.tracks:
                    f.alive = False

        if self.publish is not None:
            self.publish(t, self.window.keyframe(idx).state.pose())

    def _track_anchored(self, feats, templates, cur_pyr, levels):
        """Match each live feature against its anchor-keyframe template,
        seeded at its current position estimate."""
        groups = {}
        for f in feats:
            if f.alive and f.anchor_kf in templates:
                groups.setdefault(f.anchor_kf, []).append(f)
        for kf_idx, group in sorted(groups.items()):
            anchor_pyr = templates[kf_idx]
            pts = np.array([f.anchor_px for f in group])
            init = np.array([f.px for f in group])
            out, ok = track_points(
                None, None, pts, levels=levels, iterations=10, tol=0.02,
                pyramids=(anchor_pyr, cur_pyr), init_points=init,
            )
            for f, px, good in zip(group, out, ok):
                if good and self.camera.in_bounds(px, margin=2.0):
                    f.px = px
                else:
                    f.alive = False

    def _prune_templates(self):
        used_ts = {f.anchor_kf for f in self.event_feats if f.alive}
        used_img = {f.anchor_kf for f in self.image_feats if f.alive}
        for k in [k for k in self.ts_templates if k not in used_ts]:
            del self.ts_templates[k]
        for k in [k for k in self.img_templates if k not in used_img]:
            del self.img_templates[k]

    def _gate_outlier_tracks(self):
        """Reprojection gating at the outlier threshold: a track whose worst
        in-window residual exceeds the gate is discarded (LK drift shows up
        here long before the forward-backward check fails)."""
        from .backend import event_reprojection_residual

        states = {kf.index for kf in self.window.keyframes}
        gate = self.cfg.tracker_max_reproj_px
        drop = []
        for tid, tr in self.window.tracks.items():
            if tr.inverse_depth is None:
                continue
            anchor = tr.anchor[0]
            if anchor not in states:
                continue
            worst = 0.0
            for k, _ in tr.observations[1:]:
                if k not in states:
                    continue
                r = event_reprojection_residual(tr, anchor, k, self.window,
                                                self.camera, self.extrinsic)
                if r is None:
                    worst = np.inf
                    break
                worst = max(worst, float(np.linalg.norm(r)))
            if worst > gate:
                drop.append(tid)
        for tid in drop:
            self.window.tracks.pop(tid, None)
            for f in self.event_feats + self.image_feats:
                if f.track.id == tid:
                    f.alive = False

    def _replenish_features(self, ts_cur, at_frame_image):
        cfg = self.cfg
        idx = self.kf_index
        alive_ev = [f for f in self.event_feats if f.alive]
        if len(alive_ev) < cfg.tracker_target_features:
            existing = [f.px for f in alive_ev]
            new = detect_event_corners(
                ts_cur, existing=existing,
                target_count=cfg.tracker_target_features - len(alive_ev),
                nms_radius=cfg.tracker_nms_radius, quality=cfg.tracker_quality,
            )
            for px in new:
                self.event_feats.append(self._new_track(px, idx, "event-corner"))
        if at_frame_image is not None:
            alive_im = [f for f in self.image_feats if f.alive]
            if len(alive_im) < cfg.tracker_target_image_features:
                existing = [f.px for f in alive_im]
                new = detect_corners(
                    at_frame_image, existing=existing,
                    target_count=cfg.tracker_target_image_features - len(alive_im),
                    nms_radius=cfg.tracker_nms_radius, quality=cfg.tracker_quality,
                )
                for px in new:
                    self.image_feats.append(self._new_track(px, idx, "image-corner"))
        self.event_feats = [f for f in self.event_feats if f.alive]
        self.image_feats = [f for f in self.image_feats if f.alive]

    # -- main loop -------------------------------------------------------------

    def run(self) -> TrackerResult:
        cfg = self.cfg
        if len(self.events) == 0:
            raise ValueError("empty event stream")
        dt = cfg.events_mat_dt
        t_start = self.events.t_min
        t_end = self.events.t_max
        if self.imu:
            t_start = max(t_start, self.imu[0].t)
            t_end = min(t_end, self.imu[-1].t)
        # snap the mat grid to the absolute clock so frame timestamps (and
        # hence image observations) coincide exactly with keyframe times
        t_start = np.ceil(t_start / dt - 1e-9) * dt
        n_steps = int(np.floor((t_end - t_start) / dt))
        frame_times = np.array([t for t, _ in self.frames]) if self.frames else np.zeros(0)

        prev_ts = None
        prev_mat = None
        prev_frame_img = None
        frame_ptr = 0

        for k in range(1, n_steps + 1):
            t_k = t_start + k * dt
            horizon = 6.0 * cfg.events_eta
            sub = self.events.slice_time(t_k - max(horizon, dt), t_k)
            t0 = time.perf_counter()
            ts_cur = build_time_surface(sub, t_ref=t_k, eta=cfg.events_eta)
            mat_cur = build_event_mat(sub, t_k - dt, dt)
            self.timer.add("representations", time.perf_counter() - t0)

            # event-corner tracking on |TS|, matched against each feature's
            # anchor-keyframe template (drift-free)
            cur_ts_pyr = _build_pyramid(ts_cur.abs_values, 2)
            if prev_ts is not None and self.event_feats:
                t0 = time.perf_counter()
                self._track_anchored(
                    self.event_feats, self.ts_templates, cur_ts_pyr, levels=2)
                self.timer.add("track_event", time.perf_counter() - t0)

            # direct alignment between consecutive mats, initialized from the
            # IMU prediction; sparse mats have junk minima far from the truth,
            # so estimates straying from the prediction invalidate the chain
            if (cfg.tracker_use_direct and prev_mat is not None
                    and self.kf_index >= 0 and self.pred_prev is not None):
                t0 = time.perf_counter()
                seg = None
                try:
                    seg = slice_samples(self.imu, self.pred_prev.t, t_k)
                except ValueError:
                    pass
                if seg is not None:
                    pred_cur = dead_reckon(seg, self.pred_prev)[-1]
                    init = (self.pred_prev.pose().inverse() @ pred_cur.pose()).inverse()
                    try:
                        res = align_event_mats(
                            prev_mat, mat_cur, init, self.camera,
                            self._nominal_inverse_depth(), opts=self.align_opts,
                            extrinsic=self.extrinsic,
                        )
                        stray = res.delta_T @ init.inverse()
                        bound_t = max(2.0 * self.align_opts.trust_translation, 0.05)
                        bound_r = max(2.0 * self.align_opts.trust_rotation, 0.05)
                        sane = (np.linalg.norm(stray.t) < bound_t
                                and stray.rotation_angle() < bound_r)
                        self.chain_delta = res.delta_T @ self.chain_delta
                        self.chain_steps += 1
                        if res.converged and sane:
                            self.chain_infos.append(res.information)
                        else:
                            self.chain_ok = False
                    except DegenerateInputError:
                        self.chain_ok = False
                    self.pred_prev = pred_cur
                self.timer.add("align", time.perf_counter() - t0)
            elif self.kf_index >= 0 and self.pred_prev is not None:
                try:
                    seg = slice_samples(self.imu, self.pred_prev.t, t_k)
                    self.pred_prev = dead_reckon(seg, self.pred_prev)[-1]
                except ValueError:
                    pass
                if cfg.tracker_emit_mat_rate_poses and self.last_kf_state is not None:
                    base = self.last_kf_state.pose()
                    self.mat_rate_poses.append((t_k, base @ self.chain_delta.inverse()))

            # image-corner tracking at frame boundaries, anchored likewise
            at_frame_image = None
            while frame_ptr < len(frame_times) and frame_times[frame_ptr] <= t_k + 1e-9:
                at_frame_image = self.frames[frame_ptr][1]
                frame_ptr += 1
            cur_img_pyr = None
            if at_frame_image is not None:
                cur_img_pyr = _build_pyramid(at_frame_image, 3)
                if prev_frame_img is not None and self.image_feats:
                    t0 = time.perf_counter()
                    self._track_anchored(
                        self.image_feats, self.img_templates, cur_img_pyr, levels=3)
                    self.timer.add("track_image", time.perf_counter() - t0)
                prev_frame_img = at_frame_image

            # keyframe policy, evaluated at frame boundaries
            if at_frame_image is not None or self.kf_index < 0:
                make = self.kf_index < 0
                if not make:
                    alive = [f for f in self.event_feats if f.alive]
                    target = max(cfg.tracker_target_features, 1)
                    ratio = len(alive) / target
                    parallax = (np.mean([np.linalg.norm(f.px - f.px_at_kf) for f in alive])
                                if alive else np.inf)
                    overdue = (t_k - self.kf_times[self.kf_index]
                               > cfg.tracker_max_keyframe_dt)
                    make = (parallax > cfg.tracker_keyframe_parallax_px
                            or ratio < cfg.tracker_keyframe_min_ratio
                            or overdue)
                if make:
                    self.kf_mats[self.kf_index + 1] = mat_cur
                    self._make_keyframe(t_k, at_frame_image)
                    self.ts_templates[self.kf_index] = cur_ts_pyr
                    if cur_img_pyr is not None:
                        self.img_templates[self.kf_index] = cur_img_pyr
                    self._replenish_features(ts_cur, at_frame_image)
                    self._prune_templates()
                    for stale in [k for k in self.kf_mats
                                  if k < self.kf_index - max(self.cfg.tracker_direct_span, 1)]:
                        del self.kf_mats[stale]

            prev_ts = ts_cur
            prev_mat = mat_cur

        trajectory = list(self.frozen_poses)
        for kf in self.window.keyframes:
            trajectory.append((self.kf_times[kf.index], kf.state.pose()))
        trajectory.sort(key=lambda x: x[0])
        return TrackerResult(
            trajectory=trajectory,
            mat_rate_poses=self.mat_rate_poses,
            keyframe_count=self.kf_index + 1,
            timer=self.timer,
        )
