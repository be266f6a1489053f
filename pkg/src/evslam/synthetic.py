"""Synthetic event-camera rig: textured scenes, ray-cast rendering, the
log-intensity threshold event model, and IMU sampling.

Everything is a pure function of (scene, trajectory, time), so any module
downstream can be checked against exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .camera import CameraModel
from .geometry import Pose
from .imu import ImuSample
from .trajectory import TrajectorySpec

LOG_INTENSITY_FLOOR = 1e-3  # clamp before log: black texture stays finite


# --------------------------------------------------------------------------
# textures: callables over local surface coordinates (a, b) -> [0, 1]
# --------------------------------------------------------------------------

def uniform_texture(value=0.5):
    value = float(value)
    return lambda a, b: np.full_like(np.asarray(a, dtype=float), value)


def checkerboard_texture(cell=0.2, c0=0.1, c1=0.9):
    def tex(a, b):
        ia = np.floor(np.asarray(a) / cell).astype(np.int64)
        ib = np.floor(np.asarray(b) / cell).astype(np.int64)
        return np.where((ia + ib) % 2 == 0, c0, c1).astype(float)
    return tex


def stripes_texture(period=0.2, axis=0, c0=0.2, c1=0.8):
    def tex(a, b):
        coord = np.asarray(a if axis == 0 else b)
        k = np.floor(coord / period).astype(np.int64)
        return np.where(k % 2 == 0, c0, c1).astype(float)
    return tex


def _lattice_hash(ix, iy, seed):
    h = (ix.astype(np.uint64) * np.uint64(73856093)) ^ (
        iy.astype(np.uint64) * np.uint64(19349663)
    ) ^ np.uint64((seed * 83492791) & 0xFFFFFFFF)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995)
    h = h ^ (h >> np.uint64(15))
    return (h & np.uint64(0xFFFFFF)).astype(float) / float(0xFFFFFF)


def noise_texture(cell=0.1, seed=0, lo=0.1, hi=0.9):
    """Deterministic value noise: hashed lattice + bilinear interpolation."""
    def tex(a, b):
        x = np.asarray(a, dtype=float) / cell
        y = np.asarray(b, dtype=float) / cell
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        v00 = _lattice_hash(x0, y0, seed)
        v10 = _lattice_hash(x0 + 1, y0, seed)
        v01 = _lattice_hash(x0, y0 + 1, seed)
        v11 = _lattice_hash(x0 + 1, y0 + 1, seed)
        v = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
        return lo + (hi - lo) * v
    return tex


def mosaic_texture(cell=0.2, seed=0, lo=0.1, hi=0.9, jitter=0.35):
    """Mosaic of hashed constant cells with jittered borders.

    Random values alone do not prevent sweep ghosts: votes ignore intensity,
    so edges on a regular grid still reinforce at aliased depths. Jittering
    every border line makes the edge positions aperiodic too.
    """
    def axis_index(coord, axis_seed):
        k0 = np.floor(np.asarray(coord, dtype=float) / cell).astype(np.int64)
        idx = k0.copy()
        for cand in (k0, k0 + 1, k0 - 1):
            left = (cand + jitter * _lattice_hash(cand, cand * 7 + 1, axis_seed)) * cell
            right = (cand + 1 + jitter * _lattice_hash(cand + 1, cand * 7 + 8, axis_seed)) * cell
            hit = (coord >= left) & (coord < right)
            idx = np.where(hit, cand, idx)
        return idx

    def tex(a, b):
        ia = axis_index(a, seed * 2 + 11)
        ib = axis_index(b, seed * 2 + 12)
        return lo + (hi - lo) * _lattice_hash(ia, ib, seed)

    return tex


TEXTURE_BUILDERS = {
    "uniform": uniform_texture,
    "checkerboard": checkerboard_texture,
    "stripes": stripes_texture,
    "noise": noise_texture,
    "mosaic": mosaic_texture,
}


def make_texture(name: str, **params):
    if name not in TEXTURE_BUILDERS:
        raise ValueError(f"unknown texture '{name}' (have {sorted(TEXTURE_BUILDERS)})")
    return TEXTURE_BUILDERS[name](**params)


# --------------------------------------------------------------------------
# primitives and scene
# --------------------------------------------------------------------------

@dataclass
class TexturedPlane:
    """Finite rectangle: origin + two orthonormal in-plane axes, half extents."""

    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture: Callable = field(default_factory=uniform_texture)
    spec: Optional[dict] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.axis_u = np.asarray(self.axis_u, dtype=float)
        self.axis_v = np.asarray(self.axis_v, dtype=float)
        self.axis_u = self.axis_u / np.linalg.norm(self.axis_u)
        self.axis_v = self.axis_v / np.linalg.norm(self.axis_v)
        if abs(np.dot(self.axis_u, self.axis_v)) > 1e-9:
            raise ValueError("plane axes must be orthogonal")
        self.normal = np.cross(self.axis_u, self.axis_v)

    def intersect(self, origin, dirs):
        """Ray hits: returns (t, intensity) with t = +inf where missed."""
        denom = dirs @ self.normal
        num = (self.origin - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        pts = origin + t[..., None] * dirs
        rel = pts - self.origin
        a = rel @ self.axis_u
        b = rel @ self.axis_v
        hit = (t > 1e-6) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        t = np.where(hit, t, np.inf)
        inten = np.where(hit, self.texture(a, b), 0.0)
        return t, inten


@dataclass
class AxisAlignedBox:
    """AABB; the camera may sit inside (interior faces render), making rooms."""

    bmin: np.ndarray
    bmax: np.ndarray
    texture: Callable = field(default_factory=uniform_texture)
    face_textures: Optional[dict] = None   # optional per-face override: "+x", "-y", ...
    spec: Optional[dict] = None

    _FACE_UV = {
        0: (1, 2),  # x faces -> (y, z)
        1: (0, 2),  # y faces -> (x, z)
        2: (0, 1),  # z faces -> (x, y)
    }

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, dtype=float)
        self.bmax = np.asarray(self.bmax, dtype=float)
        if np.any(self.bmax <= self.bmin):
            raise ValueError("box bmax must exceed bmin")

    def _face_texture(self, axis, sign):
        if self.face_textures:
            key = ("+" if sign > 0 else "-") + "xyz"[axis]
            if key in self.face_textures:
                return self.face_textures[key]
        return self.texture

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.bmin - origin) * inv
        t2 = (self.bmax - origin) * inv
        tmin_ax = np.minimum(t1, t2)
        tmax_ax = np.maximum(t1, t2)
        t_near = tmin_ax.max(axis=-1)
        t_far = tmax_ax.min(axis=-1)
        valid = t_far > np.maximum(t_near, 1e-6)
        # outside: entry face at t_near; inside: exit face at t_far
        use_near = valid & (t_near > 1e-6)
        t_hit = np.where(use_near, t_near, t_far)
        t_hit = np.where(valid, t_hit, np.inf)
        axis_near = tmin_ax.argmax(axis=-1)
        axis_far = tmax_ax.argmin(axis=-1)
        axis_hit = np.where(use_near, axis_near, axis_far)

        pts = origin + t_hit[..., None] * dirs
        inten = np.zeros(t_hit.shape)
        for axis in range(3):
            sel_ax = valid & (axis_hit == axis)
            if not np.any(sel_ax):
                continue
            ua, va = self._FACE_UV[axis]
            mid = 0.5 * (self.bmin[axis] + self.bmax[axis])
            for sign in (-1, 1):
                sel = sel_ax & ((pts[..., axis] > mid) == (sign > 0))
                if not np.any(sel):
                    continue
                tex = self._face_texture(axis, sign)
                inten[sel] = tex(pts[sel][:, ua], pts[sel][:, va])
        return t_hit, inten


@dataclass
class SceneModel:
    primitives: list
    bounds: float = 50.0    # meters; rays are considered misses beyond this


@dataclass
class IntensityImage:
    values: np.ndarray      # (h, w) in [0, 1]
    valid: np.ndarray       # (h, w) bool
    t: float = 0.0


@dataclass
class DepthMap:
    depth: np.ndarray       # (h, w) meters
    valid: np.ndarray       # (h, w) bool


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _pixel_rays(camera: CameraModel):
    u = np.arange(camera.width, dtype=float)
    v = np.arange(camera.height, dtype=float)
    uu, vv = np.meshgrid(u, v)
    xn = camera.pixel_to_normalized(np.stack([uu, vv], axis=-1))
    d = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
    return d  # (h, w, 3), z-component 1 so the ray parameter equals camera depth


def _supersampled_camera(camera: CameraModel, s: int) -> CameraModel:
    # subpixel centers of an s x s split: u_hi = s*u + (s-1)/2 at the center
    return CameraModel(
        fx=camera.fx * s, fy=camera.fy * s,
        cx=camera.cx * s + (s - 1) / 2.0, cy=camera.cy * s + (s - 1) / 2.0,
        width=camera.width * s, height=camera.height * s,
        distortion=camera.distortion,
    )


def raycast(scene: SceneModel, pose_wc: Pose, camera: CameraModel,
            supersample: int = 1):
    """Cast pixel rays; returns (depth, intensity, valid).

    ``supersample`` > 1 area-averages intensity over an s x s subpixel grid;
    point-sampled hard edges otherwise stairstep and bias photometric
    trackers. Depth stays point-sampled at the pixel center.
    """
    if supersample > 1:
        cam_hi = _supersampled_camera(camera, supersample)
        _, inten_hi, valid_hi = raycast(scene, pose_wc, cam_hi)
        s = supersample
        h, w = camera.height, camera.width
        inten = inten_hi.reshape(h, s, w, s).mean(axis=(1, 3))
        depth, _, valid = raycast(scene, pose_wc, camera)
        return depth, np.where(valid, inten, 0.0), valid
    dirs_cam = _pixel_rays(camera)
    dirs_world = dirs_cam @ pose_wc.R.T
    origin = pose_wc.t
    h, w = camera.height, camera.width
    best_t = np.full((h, w), np.inf)
    best_i = np.zeros((h, w))
    for prim in scene.primitives:
        t, inten = prim.intersect(origin, dirs_world)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, inten, best_i)
    valid = np.isfinite(best_t) & (best_t <= scene.bounds)
    depth = np.where(valid, best_t, 0.0)
    intensity = np.where(valid, best_i, 0.0)
    return depth, intensity, valid


def render_intensity(scene: SceneModel, pose: Pose, camera: CameraModel,
                     t: float = 0.0, supersample: int = 1) -> IntensityImage:
    _, intensity, valid = raycast(scene, pose, camera, supersample=supersample)
    return IntensityImage(values=intensity, valid=valid, t=t)


def ground_truth_depth(scene: SceneModel, pose: Pose, camera: CameraModel) -> DepthMap:
    depth, _, valid = raycast(scene, pose, camera)
    return DepthMap(depth=depth, valid=valid)


def log_intensity(image_values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(image_values, LOG_INTENSITY_FLOOR))


# --------------------------------------------------------------------------
# event generation: per-pixel log-intensity threshold crossings
# --------------------------------------------------------------------------

def generate_events(
    scene: SceneModel,
    traj: TrajectorySpec,
    camera: CameraModel,
    threshold: float = 0.2,
    rate: float = 200.0,
    t0: float = 0.0,
    t1=None,
    timestamp_jitter: float = 0.0,
    threshold_jitter: float = 0.0,
    seed: int = 0,
    extrinsic: Optional[Pose] = None,
    progress: Optional[Callable] = None,
    supersample: int = 1,
):
    """Emit an event whenever accumulated delta-log-intensity crosses the
    threshold, timestamped by linear interpolation between render samples.

    ``extrinsic`` is body-from-camera; the trajectory drives the body frame.
    """
    from .events import EventStream

    if threshold <= 0:
        raise ValueError("contrast threshold must be positive")
    if rate <= 0:
        raise ValueError("render rate must be positive")
    if t1 is None:
        t1 = traj.duration
    extrinsic = extrinsic or Pose.identity()

    rng = np.random.default_rng(seed)
    h, w = camera.height, camera.width
    thr = np.full((h, w), float(threshold))
    if threshold_jitter > 0:
        thr = thr * (1.0 + threshold_jitter * rng.standard_normal((h, w)))
        thr = np.maximum(thr, 0.05 * threshold)

    n_steps = int(np.ceil((t1 - t0) * rate - 1e-9))
    times = t0 + np.arange(n_steps + 1) / rate
    times[-1] = min(times[-1], t1)

    def render_log(t):
        pose_cam = traj.pose(t) @ extrinsic
        _, inten, valid = raycast(scene, pose_cam, camera, supersample=supersample)
        return log_intensity(np.where(valid, inten, 0.0))

    L_prev = render_log(times[0])
    L_ref = L_prev.copy()

    ev_t, ev_u, ev_v, ev_p = [], [], [], []
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    uu = uu.ravel()
    vv = vv.ravel()

    for k in range(1, len(times)):
        ta, tb = times[k - 1], times[k]
        L_cur = render_log(times[k])
        delta = L_cur - L_ref
        sign = np.sign(delta)
        n_cross = np.floor((np.abs(delta) / thr) + 1e-9).astype(np.int64)
        fired = n_cross.ravel() > 0
        if np.any(fired):
            counts = n_cross.ravel()[fired]
            total = int(counts.sum())
            rep = np.repeat(np.flatnonzero(fired), counts)
            # per-event crossing ordinal 1..n within its pixel
            stops = np.cumsum(counts)
            ordinal = np.arange(total) - np.repeat(stops - counts, counts) + 1
            s = sign.ravel()[rep]
            levels = L_ref.ravel()[rep] + ordinal * thr.ravel()[rep] * s
            la = L_prev.ravel()[rep]
            lb = L_cur.ravel()[rep]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = (levels - la) / (lb - la)
            frac = np.clip(np.where(np.isfinite(frac), frac, 1.0), 0.0, 1.0)
            t_ev = ta + frac * (tb - ta)
            if timestamp_jitter > 0:
                t_ev = t_ev + timestamp_jitter * rng.standard_normal(total)
                t_ev = np.clip(t_ev, ta, tb)
            order = np.lexsort((s, rep, t_ev))
            ev_t.append(t_ev[order])
            ev_u.append(uu[rep][order])
            ev_v.append(vv[rep][order])
            ev_p.append(s[order].astype(np.int8))
            L_ref.ravel()[np.flatnonzero(fired)] += counts * thr.ravel()[fired] * sign.ravel()[fired]
        L_prev = L_cur
        if progress is not None:
            progress(k, len(times) - 1)

    if not ev_t:
        return EventStream([], [], [], [], w, h)
    t = np.concatenate(ev_t)
    u = np.concatenate(ev_u)
    v = np.concatenate(ev_v)
    p = np.concatenate(ev_p)
    order = np.lexsort((p, v * w + u, t))
    return EventStream(t[order], u[order], v[order], p[order], w, h)


# --------------------------------------------------------------------------
# IMU simulation
# --------------------------------------------------------------------------

@dataclass
class ImuNoise:
    gyro_sigma: float = 0.0      # rad/s white noise per sample
    accel_sigma: float = 0.0     # m/s^2 white noise per sample
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))


def simulate_imu(
    traj: TrajectorySpec,
    rate: float = 200.0,
    gravity=np.array([0.0, 0.0, -9.81]),
    noise: Optional[ImuNoise] = None,
    t0: float = 0.0,
    t1=None,
    seed: int = 0,
):
    """Ideal gyro/accelerometer samples; accel includes the gravity reaction."""
    if rate <= 0:
        raise ValueError("IMU rate must be positive")
    if t1 is None:
        t1 = traj.duration
    noise = noise or ImuNoise()
    g = np.asarray(gravity, dtype=float)
    rng = np.random.default_rng(seed)

    n = int(np.floor((t1 - t0) * rate + 1e-9)) + 1
    samples = []
    for k in range(n):
        t = t0 + k / rate
        pose = traj.pose(t)
        omega = traj.omega_body(t)
        accel_world = traj.acceleration(t)
        f = pose.R.T @ (accel_world - g)
        gyro = omega + noise.gyro_bias
        acc = f + noise.accel_bias
        if noise.gyro_sigma > 0:
            gyro = gyro + noise.gyro_sigma * rng.standard_normal(3)
        if noise.accel_sigma > 0:
            acc = acc + noise.accel_sigma * rng.standard_normal(3)
        samples.append(ImuSample(t=t, gyro=gyro, accel=acc))
    return samples


# --------------------------------------------------------------------------
# scene config files: one primitive per line, key=value fields
# --------------------------------------------------------------------------

def _parse_vec(s):
    return np.array([float(x) for x in s.split(",")])


def _texture_from_fields(fields):
    name = fields.pop("texture", "uniform")
    params = {}
    for key in ("cell", "period", "c0", "c1", "value", "lo", "hi"):
        if key in fields:
            params[key] = float(fields.pop(key))
    for key in ("axis", "seed"):
        if key in fields:
            params[key] = int(float(fields.pop(key)))
    spec = {"texture": name, **params}
    return make_texture(name, **params), spec


def parse_scene_file(path) -> SceneModel:
    """Declarative scene description, e.g.::

        plane center=0,0,2 eu=1,0,0 ev=0,1,0 half=1.0,0.8 texture=checkerboard cell=0.2
        box min=-2,-2,-1.5 max=2,2,1.5 texture=stripes period=0.3 axis=0
    """
    primitives = []
    bounds = 50.0
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            kind = tokens[0]
            fields = {}
            for tok in tokens[1:]:
                key, _, val = tok.partition("=")
                fields[key] = val
            try:
                if kind == "bounds":
                    bounds = float(fields["value"])
                elif kind == "plane":
                    tex, spec = _texture_from_fields(fields)
                    half = _parse_vec(fields["half"])
                    primitives.append(TexturedPlane(
                        origin=_parse_vec(fields["center"]),
                        axis_u=_parse_vec(fields["eu"]),
                        axis_v=_parse_vec(fields["ev"]),
                        half_u=half[0], half_v=half[1],
                        texture=tex,
                        spec={"kind": "plane", "center": fields["center"],
                              "eu": fields["eu"], "ev": fields["ev"],
                              "half": fields["half"], **spec},
                    ))
                elif kind == "box":
                    tex, spec = _texture_from_fields(fields)
                    primitives.append(AxisAlignedBox(
                        bmin=_parse_vec(fields["min"]),
                        bmax=_parse_vec(fields["max"]),
                        texture=tex,
                        spec={"kind": "box", "min": fields["min"],
                              "max": fields["max"], **spec},
                    ))
                else:
                    raise ValueError(f"unknown primitive '{kind}'")
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scene line: {exc}") from exc
    return SceneModel(primitives=primitives, bounds=bounds)


def wavy_stripes_texture(period=0.5, c0=0.25, c1=0.75, wave_amp=0.35,
                         wave_period=1.3):
    """Horizontal bands with a slow lateral undulation: edges everywhere for
    events and direct alignment, but the only corner-like structure is weak
    and elongated (curvature extrema of long curves), so feature detection
    and localization degrade. This is the low-texture regime where direct
    photometric alignment retains full-frame support."""
    def tex(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        phase = b / period + wave_amp * np.sin(2.0 * np.pi * a / wave_period)
        return np.where(np.floor(phase).astype(np.int64) % 2 == 0, c0, c1)

    return tex


TEXTURE_BUILDERS["wavy_stripes"] = wavy_stripes_texture


def _room_walls(front_right_texture, front_right_spec):
    prims = [
        TexturedPlane([-2.2, 0.0, 3.0], [1, 0, 0], [0, 1, 0], 2.2, 2.6,
                      checkerboard_texture(0.4, 0.15, 0.85),
                      spec={"kind": "plane", "center": "-2.2,0,3", "eu": "1,0,0",
                            "ev": "0,1,0", "half": "2.2,2.6",
                            "texture": "checkerboard", "cell": 0.4,
                            "c0": 0.15, "c1": 0.85}),
        TexturedPlane([2.2, 0.0, 3.0], [1, 0, 0], [0, 1, 0], 2.2, 2.6,
                      front_right_texture,
                      spec={"kind": "plane", "center": "2.2,0,3", "eu": "1,0,0",
                            "ev": "0,1,0", "half": "2.2,2.6",
                            **front_right_spec}),
    ]
    return prims


def preset_scene(name: str) -> SceneModel:
    """Built-in scenes used by the CLI and the verification suite."""
    if name == "checker_room":
        # fully corner-rich room: every wall is a checkerboard
        prims = _room_walls(
            checkerboard_texture(0.35, 0.2, 0.8),
            {"texture": "checkerboard", "cell": 0.35, "c0": 0.2, "c1": 0.8},
        )
    elif name == "checker_room_lowtex":
        # right front wall gives events but almost no corners: the
        # low-texture segment of the trajectory sees mostly this wall
        prims = _room_walls(
            stripes_texture(0.5, 1, 0.25, 0.75),
            {"texture": "stripes", "period": 0.5, "axis": 1,
             "c0": 0.25, "c1": 0.75},
        )
    if name in ("checker_room", "checker_room_lowtex"):
        prims = prims + [
            TexturedPlane([-4.4, 0.0, 1.0], [0, 0, 1], [0, 1, 0], 2.5, 2.6,
                          checkerboard_texture(0.5, 0.2, 0.8),
                          spec={"kind": "plane", "center": "-4.4,0,1", "eu": "0,0,1",
                                "ev": "0,1,0", "half": "2.5,2.6",
                                "texture": "checkerboard", "cell": 0.5,
                                "c0": 0.2, "c1": 0.8}),
            TexturedPlane([4.4, 0.0, 1.0], [0, 0, 1], [0, 1, 0], 2.5, 2.6,
                          checkerboard_texture(0.5, 0.2, 0.8),
                          spec={"kind": "plane", "center": "4.4,0,1", "eu": "0,0,1",
                                "ev": "0,1,0", "half": "2.5,2.6",
                                "texture": "checkerboard", "cell": 0.5,
                                "c0": 0.2, "c1": 0.8}),
        ]
        return SceneModel(prims)
    if name == "plane_checker":
        return SceneModel([
            TexturedPlane([0.0, 0.0, 2.0], [1, 0, 0], [0, 1, 0], 3.0, 2.2,
                          checkerboard_texture(0.25, 0.15, 0.85),
                          spec={"kind": "plane", "center": "0,0,2", "eu": "1,0,0",
                                "ev": "0,1,0", "half": "3.0,2.2",
                                "texture": "checkerboard", "cell": 0.25,
                                "c0": 0.15, "c1": 0.85}),
        ])
    if name == "plane_mosaic":
        # aperiodic texture: periodic checkers alias into ghost depths when a
        # long sweep feeds one reference view
        return SceneModel([
            TexturedPlane([0.0, 0.0, 2.0], [1, 0, 0], [0, 1, 0], 3.0, 2.2,
                          mosaic_texture(0.15, seed=5, lo=0.12, hi=0.92),
                          spec={"kind": "plane", "center": "0,0,2", "eu": "1,0,0",
                                "ev": "0,1,0", "half": "3.0,2.2",
                                "texture": "mosaic", "cell": 0.15, "seed": 5,
                                "lo": 0.12, "hi": 0.92}),
        ])
    if name == "two_plane":
        # piecewise-planar: bright near plane (right) over a dark far plane,
        # both low-contrast mosaics so segmentation splits only at the seam
        return SceneModel([
            TexturedPlane([-0.9, 0.0, 3.0], [1, 0, 0], [0, 1, 0], 2.3, 2.0,
                          mosaic_texture(0.3, seed=2, lo=0.22, hi=0.46),
                          spec={"kind": "plane", "center": "-0.9,0,3", "eu": "1,0,0",
                                "ev": "0,1,0", "half": "2.3,2.0",
                                "texture": "mosaic", "cell": 0.3, "seed": 2,
                                "lo": 0.22, "hi": 0.46}),
            TexturedPlane([0.8, 0.0, 1.5], [1, 0, 0], [0, 1, 0], 0.8, 1.1,
                          mosaic_texture(0.18, seed=3, lo=0.55, hi=0.90),
                          spec={"kind": "plane", "center": "0.8,0,1.5", "eu": "1,0,0",
                                "ev": "0,1,0", "half": "0.8,1.1",
                                "texture": "mosaic", "cell": 0.18, "seed": 3,
                                "lo": 0.55, "hi": 0.90}),
        ])
    raise ValueError(f"unknown scene preset '{name}' (have checker_room, "
                     f"checker_room_lowtex, plane_checker, plane_mosaic, two_plane)")


def preset_trajectory(name: str, duration: float, speed: float = 0.25):
    """Built-in analytic trajectories matching the preset scenes."""
    from .trajectory import line_trajectory, sinusoid_trajectory

    if name == "orbit":
        # pan across the split wall with gentle rotation: one slow x period
        return sinusoid_trajectory(
            base_position=[0.0, 0.0, 0.0],
            translation_amplitude=[6.0 * speed, 0.8 * speed, 0.6 * speed],
            translation_freq_hz=[1.0 / duration, 2.3 / duration, 1.7 / duration],
            rotation_amplitude=[0.06, 0.10, 0.05],
            rotation_freq_hz=[1.9 / duration, 1.3 / duration, 2.9 / duration],
            duration=duration,
        )
    if name == "sweep":
        return line_trajectory([-speed * duration / 2, 0.0, 0.0],
                               [speed, 0.0, 0.0], duration)
    if name == "wiggle":
        return sinusoid_trajectory(
            base_position=[0.0, 0.0, 0.0],
            translation_amplitude=[speed, 0.6 * speed, 0.4 * speed],
            translation_freq_hz=[0.4, 0.3, 0.35],
            rotation_amplitude=[0.08, 0.1, 0.12],
            rotation_freq_hz=[0.3, 0.25, 0.2],
            duration=duration,
        )
    raise ValueError(f"unknown trajectory preset '{name}' (have orbit, sweep, wiggle)")


def save_scene_file(path, scene: SceneModel):
    lines = [f"bounds value={scene.bounds}"]
    for prim in scene.primitives:
        if prim.spec is None:
            raise ValueError("primitive lacks a serializable spec")
        fields = dict(prim.spec)
        kind = fields.pop("kind")
        lines.append(kind + " " + " ".join(f"{k}={v}" for k, v in fields.items()))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
