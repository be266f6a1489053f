"""Pinhole camera with radial-tangential distortion (k1, k2, p1, p2)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        d = np.asarray(self.distortion, dtype=float).reshape(-1)
        if d.size != 4:
            raise ValueError("distortion must be (k1, k2, p1, p2)")
        object.__setattr__(self, "distortion", d.copy())
        self.distortion.setflags(write=False)

    @property
    def has_distortion(self) -> bool:
        return bool(np.any(self.distortion != 0.0))

    def distort_normalized(self, xn):
        """Apply rad-tan distortion to normalized coordinates (..., 2)."""
        xn = np.asarray(xn, dtype=float)
        k1, k2, p1, p2 = self.distortion
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def undistort_normalized(self, xd, iterations: int = 8):
        """Invert distortion by fixed-point iteration."""
        xd = np.asarray(xd, dtype=float)
        if not self.has_distortion:
            return xd.copy()
        xn = xd.copy()
        for _ in range(iterations):
            k1, k2, p1, p2 = self.distortion
            x, y = xn[..., 0], xn[..., 1]
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
            dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
            xn = np.stack(
                [(xd[..., 0] - dx) / radial, (xd[..., 1] - dy) / radial], axis=-1
            )
        return xn

    def project(self, point_cam):
        """Project camera-frame point(s) (..., 3) to pixel(s) (..., 2)."""
        p = np.asarray(point_cam, dtype=float)
        z = p[..., 2]
        if np.any(z <= 0):
            raise BehindCameraError("point has non-positive depth")
        xn = np.stack([p[..., 0] / z, p[..., 1] / z], axis=-1)
        if self.has_distortion:
            xn = self.distort_normalized(xn)
        u = self.fx * xn[..., 0] + self.cx
        v = self.fy * xn[..., 1] + self.cy
        return np.stack([u, v], axis=-1)

    def back_project(self, pixel, inverse_depth):
        """Camera-frame point(s) at depth 1/lambda along the pixel ray."""
        lam = np.asarray(inverse_depth, dtype=float)
        if np.any(lam <= 0):
            raise ValueError("inverse depth must be positive")
        xn = self.pixel_to_normalized(pixel)
        depth = 1.0 / lam
        x = xn[..., 0] * depth
        y = xn[..., 1] * depth
        z = np.broadcast_to(depth, x.shape)
        return np.stack([x, y, z], axis=-1)

    def pixel_to_normalized(self, pixel):
        """Undistorted normalized coordinates of pixel(s) (..., 2)."""
        px = np.asarray(pixel, dtype=float)
        xd = np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy],
            axis=-1,
        )
        return self.undistort_normalized(xd)

    def normalized_to_pixel(self, xn):
        xn = np.asarray(xn, dtype=float)
        if self.has_distortion:
            xn = self.distort_normalized(xn)
        return np.stack(
            [self.fx * xn[..., 0] + self.cx, self.fy * xn[..., 1] + self.cy], axis=-1
        )

    def in_bounds(self, pixel, margin: float = 0.0):
        px = np.asarray(pixel, dtype=float)
        return (
            (px[..., 0] >= margin)
            & (px[..., 0] <= self.width - 1 - margin)
            & (px[..., 1] >= margin)
            & (px[..., 1] <= self.height - 1 - margin)
        )

    def intrinsic_matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def load_calibration(path):
    """Read camera + extrinsics from a flat key-value file.

    Expected keys: fx fy cx cy k1 k2 p1 p2 width height and the body-from-camera
    extrinsic as t_b_e_{x,y,z}, q_b_e_{w,x,y,z}.
    """
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()

    def fget(key, default=None):
        if key not in kv:
            if default is None:
                raise KeyError(f"calibration file missing key '{key}'")
            return default
        return float(kv[key])

    camera = CameraModel(
        fx=fget("fx"),
        fy=fget("fy"),
        cx=fget("cx"),
        cy=fget("cy"),
        width=int(fget("width")),
        height=int(fget("height")),
        distortion=np.array(
            [fget("k1", 0.0), fget("k2", 0.0), fget("p1", 0.0), fget("p2", 0.0)]
        ),
    )
    extrinsic = Pose(
        q=np.array(
            [fget("q_b_e_w", 1.0), fget("q_b_e_x", 0.0), fget("q_b_e_y", 0.0), fget("q_b_e_z", 0.0)]
        ),
        t=np.array([fget("t_b_e_x", 0.0), fget("t_b_e_y", 0.0), fget("t_b_e_z", 0.0)]),
    )
    return camera, extrinsic


def save_calibration(path, camera: CameraModel, extrinsic: Pose):
    k1, k2, p1, p2 = (float(x) for x in camera.distortion)
    lines = [
        f"fx = {float(camera.fx)!r}",
        f"fy = {float(camera.fy)!r}",
        f"cx = {float(camera.cx)!r}",
        f"cy = {float(camera.cy)!r}",
        f"width = {camera.width}",
        f"height = {camera.height}",
        f"k1 = {k1!r}",
        f"k2 = {k2!r}",
        f"p1 = {p1!r}",
        f"p2 = {p2!r}",
        f"q_b_e_w = {float(extrinsic.q[0])!r}",
        f"q_b_e_x = {float(extrinsic.q[1])!r}",
        f"q_b_e_y = {float(extrinsic.q[2])!r}",
        f"q_b_e_z = {float(extrinsic.q[3])!r}",
        f"t_b_e_x = {float(extrinsic.t[0])!r}",
        f"t_b_e_y = {float(extrinsic.t[1])!r}",
        f"t_b_e_z = {float(extrinsic.t[2])!r}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
