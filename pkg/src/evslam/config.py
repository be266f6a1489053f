"""Flat key-value pipeline configuration.

File syntax is one `group.key = value` per line with `#` comments; unknown
keys are rejected with their line number. `print-config` dumps every key
with its default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np


@dataclass
class PipelineConfig:
    # event representations
    events_eta: float = 0.03                 # time-surface decay (s)
    events_mat_dt: float = 0.01              # event-mat window (s)

    # synthetic rig
    sim_scene: str = "checker_room"          # preset name or scene file path
    sim_trajectory: str = "orbit"            # orbit | line | wiggle
    sim_duration: float = 4.0
    sim_render_rate: float = 150.0
    sim_frame_rate: float = 25.0
    sim_imu_rate: float = 200.0
    sim_threshold: float = 0.2               # log-intensity contrast
    sim_speed: float = 0.25
    sim_fx: float = 150.0
    sim_fy: float = 150.0
    sim_cx: float = 64.0
    sim_cy: float = 48.0
    sim_width: int = 128
    sim_height: int = 96
    sim_timestamp_jitter: float = 0.0
    sim_threshold_jitter: float = 0.0
    sim_supersample: int = 2
    sim_imu_gyro_noise: float = 0.0      # rad/s per sample
    sim_imu_accel_noise: float = 0.0     # m/s^2 per sample
    sim_imu_gyro_bias: float = 0.0       # constant bias magnitude
    sim_imu_accel_bias: float = 0.0

    # feature tracker
    tracker_target_features: int = 80
    tracker_target_image_features: int = 60
    tracker_nms_radius: float = 10.0
    tracker_quality: float = 0.03
    tracker_keyframe_parallax_px: float = 10.0
    tracker_keyframe_min_ratio: float = 0.6
    tracker_max_keyframe_dt: float = 0.6
    tracker_window_size: int = 10
    tracker_event_sigma_px: float = 1.5
    tracker_image_sigma_px: float = 1.5
    tracker_huber_px: float = 1.0
    tracker_min_baseline: float = 0.02
    tracker_max_reproj_px: float = 3.0
    tracker_fallback_inverse_depth: float = 1.0 / 3.0
    tracker_bias_prior_gyro: float = 5e-3
    tracker_bias_prior_accel: float = 5e-2
    tracker_gyro_sigma: float = 1e-3     # preintegration per-sample noise
    tracker_accel_sigma: float = 1e-2
    tracker_bootstrap: str = "groundtruth"   # groundtruth | imu
    tracker_use_direct: bool = True
    tracker_direct_span: int = 5
    tracker_direct_short_factors: bool = True
    tracker_marginalize_direct: bool = False
    tracker_use_imu: bool = True
    tracker_emit_mat_rate_poses: bool = False
    tracker_max_iterations: int = 8

    # direct alignment
    align_sigma_px: float = 1.5
    align_pyramid_levels: int = 3
    align_min_active: int = 200
    align_max_iterations: int = 50
    align_information_trace: float = 6e4
    align_trust_translation: float = 0.015   # per-mat ball around the IMU init
    align_trust_rotation: float = 0.015

    # mapping
    mapping_rv_translation: float = 0.05
    mapping_rv_rotation_deg: float = 5.0
    mapping_dsi_near: float = 0.5
    mapping_dsi_far: float = 10.0
    mapping_dsi_planes: int = 100
    mapping_min_votes: float = 3.0
    mapping_vote_ratio: float = 2.0
    mapping_nms_radius: int = 1
    mapping_segment_tolerance: float = 0.08
    mapping_min_segment_px: int = 30
    mapping_inpaint_radius: int = 7
    mapping_filter_enabled: bool = True
    mapping_max_rv: int = 0                  # 0 = unlimited

    # TSDF fusion
    tsdf_voxel_size: float = 0.01
    tsdf_w_max: float = 100.0
    tsdf_full_ray_update: bool = False

    # runtime
    run_threads: int = 2
    run_seed: int = 0
    run_queue_depth: int = 64
    gravity_z: float = -9.81

    def gravity(self):
        return np.array([0.0, 0.0, self.gravity_z])

    # ---- flat key mapping -------------------------------------------------

    @classmethod
    def _key_to_field(cls, key: str) -> str:
        return key.strip().replace(".", "_")

    @classmethod
    def _field_to_key(cls, name: str) -> str:
        return name.replace("_", ".", 1)

    def items(self):
        for f in fields(self):
            yield self._field_to_key(f.name), getattr(self, f.name)

    def set_key(self, key: str, raw: str):
        name = self._key_to_field(key)
        spec = {f.name: f for f in fields(self)}.get(name)
        if spec is None:
            raise KeyError(f"unknown config key '{key}'")
        raw = raw.strip()
        if spec.type == "bool" or isinstance(getattr(self, name), bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                value = True
            elif raw.lower() in ("0", "false", "no", "off"):
                value = False
            else:
                raise ValueError(f"config key '{key}': not a boolean: {raw!r}")
        elif isinstance(getattr(self, name), int):
            value = int(raw)
        elif isinstance(getattr(self, name), float):
            value = float(raw)
        else:
            value = raw
        setattr(self, name, value)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        cfg = cls()
        with open(path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                try:
                    cfg.set_key(key, value)
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        cfg.validate()
        return cfg

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dump())

    def dump(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def validate(self):
        if self.events_eta <= 0 or self.events_mat_dt <= 0:
            raise ValueError("event representation constants must be positive")
        if not (0 < self.mapping_dsi_near < self.mapping_dsi_far):
            raise ValueError("need 0 < dsi near < far")
        if self.tracker_window_size < 2:
            raise ValueError("window needs at least 2 keyframes")
        if self.tsdf_voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if self.run_queue_depth < 1:
            raise ValueError("queue depth must be >= 1")
        return self
