"""Incremental mapping engine: RV selection over the incoming pose stream,
per-RV space sweep, image-guided inpainting, and TSDF fusion.

An RV's event window closes when the next RV is created; the engine then
runs the full depth pipeline for the closed window. Feeding poses one at a
time makes the same code serve both the batch `map` run and the pipelined
`slam` run.
"""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import CameraModel
from .config import PipelineConfig
from .events import EventStream
from .evaluate import StageTimer
from .geometry import Pose, PoseBuffer
from .inpaint import colorize, filter_depth, inpaint_depth, region_grow_segment
from .space_sweep import (
    ReferenceView,
    back_project_events,
    extract_semi_dense,
    new_dsi,
    select_reference_view,
)
from .tsdf import TsdfGrid, extract_mesh, integrate_depth_map


@dataclass
class RvProduct:
    index: int
    rv: ReferenceView
    semi_dense: object
    dense: object
    cloud_points: np.ndarray
    cloud_intensity: np.ndarray


@dataclass
class MappingResult:
    products: list
    grid: TsdfGrid
    mesh: object
    skipped_rvs: int = 0
    timer: Optional[StageTimer] = None


class MappingEngine:
    def __init__(self, config: PipelineConfig, camera: CameraModel, extrinsic: Pose,
                 events: EventStream, frames, out_dir: Optional[str] = None):
        self.cfg = config
        self.camera = camera
        self.extrinsic = extrinsic
        self.events = events
        self.frames = frames
        self.out_dir = out_dir
        self.pose_buf = PoseBuffer()          # event-camera poses
        self.pending: list = []               # (t, pose) waiting for RV scan
        self.rv_open: Optional[ReferenceView] = None
        self.products: list = []
        self.grid = TsdfGrid(config.tsdf_voxel_size, config.tsdf_w_max)
        self.skipped_rvs = 0
        self.timer = StageTimer()
        self._rv_counter = 0

    # -- pose ingestion -------------------------------------------------------

    def feed(self, t: float, body_pose: Pose):
        cam_pose = body_pose @ self.extrinsic
        self.pose_buf.append(t, cam_pose)
        self.pending.append((t, cam_pose))
        self._advance()

    def _advance(self):
        while True:
            rv = select_reference_view(
                iter(self.pending), self.rv_open,
                translation_threshold=self.cfg.mapping_rv_translation,
                rotation_threshold=np.deg2rad(self.cfg.mapping_rv_rotation_deg),
                frames=self.frames,
            )
            if rv is None:
                # keep only poses newer than the open RV for the next scan
                if self.rv_open is not None:
                    self.pending = [p for p in self.pending if p[0] > self.rv_open.t]
                return
            if self.rv_open is not None:
                self._process_rv(self.rv_open, self.rv_open.t, rv.t)
            self.rv_open = rv
            self.pending = [p for p in self.pending if p[0] > rv.t]

    def finish(self) -> MappingResult:
        if self.rv_open is not None and len(self.pose_buf) > 0:
            t_end = self.pose_buf.times[-1]
            if t_end > self.rv_open.t + 1e-9:
                self._process_rv(self.rv_open, self.rv_open.t, t_end)
            self.rv_open = None
        t0 = time.perf_counter()
        mesh = extract_mesh(self.grid)
        self.timer.add("mesh", time.perf_counter() - t0)
        return MappingResult(
            products=self.products, grid=self.grid, mesh=mesh,
            skipped_rvs=self.skipped_rvs, timer=self.timer,
        )

    # -- per-RV pipeline --------------------------------------------------------

    def _process_rv(self, rv: ReferenceView, t0: float, t1: float):
        cfg = self.cfg
        if cfg.mapping_max_rv and self._rv_counter >= cfg.mapping_max_rv:
            return
        if not self.pose_buf.covers(t0, t1):
            warnings.warn(f"RV at t={t0:.3f}: pose stream does not cover "
                          f"[{t0:.3f}, {t1:.3f}], skipped")
            self.skipped_rvs += 1
            return
        window = self.events.slice_time(t0, t1)
        if len(window) == 0:
            self.skipped_rvs += 1
            return
        index = self._rv_counter
        self._rv_counter += 1

        tick = time.perf_counter()
        dsi = new_dsi(self.camera, rv, near=cfg.mapping_dsi_near,
                      far=cfg.mapping_dsi_far, n=cfg.mapping_dsi_planes)
        back_project_events(dsi, window, self.pose_buf, self.camera)
        semi = extract_semi_dense(dsi, min_votes=cfg.mapping_min_votes,
                                  nms_radius=cfg.mapping_nms_radius,
                                  ratio=cfg.mapping_vote_ratio)
        self.timer.add("dsi", time.perf_counter() - tick)

        dense = None
        cloud_pts = np.zeros((0, 3))
        cloud_int = np.zeros(0)
        if rv.image is not None and semi.valid.any():
            img = rv.image.values if hasattr(rv.image, "values") else rv.image
            tick = time.perf_counter()
            seg = region_grow_segment(img, cfg.mapping_segment_tolerance,
                                      cfg.mapping_min_segment_px)
            dense = inpaint_depth(semi, img, seg, eps_radius=cfg.mapping_inpaint_radius)
            if cfg.mapping_filter_enabled:
                dense = filter_depth(dense)
            self.timer.add("inpaint", time.perf_counter() - tick)

            tick = time.perf_counter()
            pts_rv, inten, _ = colorize(dense, img, rv, self.camera)
            cloud_pts = rv.pose.act(pts_rv) if len(pts_rv) else pts_rv
            cloud_int = inten
            integrate_depth_map(self.grid, dense.depth, dense.valid, rv.pose,
                                self.camera, color=img,
                                full_ray_update=cfg.tsdf_full_ray_update)
            self.timer.add("tsdf", time.perf_counter() - tick)

        product = RvProduct(index=index, rv=rv, semi_dense=semi, dense=dense,
                            cloud_points=cloud_pts, cloud_intensity=cloud_int)
        self.products.append(product)
        if self.out_dir is not None:
            self._write_product(product)

    def _write_product(self, product: RvProduct):
        from .dataio import save_mask_png, save_pfm

        k = product.index
        semi = product.semi_dense
        save_pfm(os.path.join(self.out_dir, f"rv_{k}_semidense.pfm"),
                 np.where(semi.valid, semi.depth, 0.0))
        save_mask_png(os.path.join(self.out_dir, f"rv_{k}_semidense_valid.png"),
                      semi.valid)
        if product.dense is not None:
            save_pfm(os.path.join(self.out_dir, f"rv_{k}_dense.pfm"),
                     np.where(product.dense.valid, product.dense.depth, 0.0))
            save_mask_png(os.path.join(self.out_dir, f"rv_{k}_dense_valid.png"),
                          product.dense.valid)
