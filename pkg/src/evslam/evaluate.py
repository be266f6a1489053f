"""Trajectory and depth metrics: SE(3)-aligned ATE, mean depth error with
zero-fill for unrecovered pixels, density percentage, stage timings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


class AssociationError(ValueError):
    pass


def associate(est, ref, max_dt: float = 0.010):
    """Nearest-neighbor timestamp association within a gate.

    est, ref: lists of (t, Pose). Returns index pairs (i_est, i_ref).
    """
    if not est or not ref:
        raise AssociationError("empty trajectory")
    ref_t = np.array([t for t, _ in ref])
    pairs = []
    used = set()
    for i, (t, _) in enumerate(est):
        j = int(np.clip(np.searchsorted(ref_t, t), 0, len(ref_t) - 1))
        if j > 0 and abs(ref_t[j - 1] - t) < abs(ref_t[j] - t):
            j -= 1
        if abs(ref_t[j] - t) <= max_dt and j not in used:
            pairs.append((i, j))
            used.add(j)
    if len(pairs) < 3:
        raise AssociationError(
            f"only {len(pairs)} associations within {max_dt*1e3:.0f} ms gate"
        )
    return pairs


def horn_se3(src, dst):
    """Closed-form rigid transform (R, t) minimizing ||dst - (R src + t)||^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(est, ref, max_dt: float = 0.010):
    """RMSE of translation after closed-form SE(3) alignment of est onto ref.

    Returns (ate, aligned_est_positions, matched_ref_positions).
    """
    pairs = associate(est, ref, max_dt)
    p_est = np.array([est[i][1].t for i, _ in pairs])
    p_ref = np.array([ref[j][1].t for _, j in pairs])
    R, t = horn_se3(p_est, p_ref)
    aligned = p_est @ R.T + t
    err = aligned - p_ref
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1)))), aligned, p_ref


def trajectory_length(ref) -> float:
    p = np.array([pose.t for _, pose in ref])
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def depth_metrics(est_depth, est_valid, gt_depth, gt_valid):
    """(mean_error_m, density_percent) against dense ground truth.

    Pixels where estimation failed count as zero depth, i.e. their full
    ground-truth depth enters the error; density is the recovered fraction
    of ground-truth-valid pixels.
    """
    gt_valid = np.asarray(gt_valid, dtype=bool)
    est_valid = np.asarray(est_valid, dtype=bool)
    n_gt = int(np.count_nonzero(gt_valid))
    if n_gt == 0:
        raise ValueError("ground truth has no valid pixels")
    est = np.where(est_valid, est_depth, 0.0)
    err = np.abs(est - gt_depth)[gt_valid]
    density = 100.0 * np.count_nonzero(est_valid & gt_valid) / n_gt
    return float(err.mean()), float(density)


@dataclass
class MetricsReport:
    ate_m: float = float("nan")
    trajectory_length_m: float = float("nan")
    mean_depth_error_m: float = float("nan")
    density_percent: float = float("nan")
    timings_ms: dict = field(default_factory=dict)   # stage -> {mean, std, count}

    def to_json(self) -> str:
        return json.dumps(
            {
                "ate_m": self.ate_m,
                "trajectory_length_m": self.trajectory_length_m,
                "mean_depth_error_m": self.mean_depth_error_m,
                "density_percent": self.density_percent,
                "timings_ms": self.timings_ms,
            },
            indent=2,
            allow_nan=True,
        )


class StageTimer:
    """Accumulates wall-clock samples per pipeline stage."""

    def __init__(self):
        self.samples = {}

    def add(self, stage: str, seconds: float):
        self.samples.setdefault(stage, []).append(seconds * 1e3)

    def summary(self):
        out = {}
        for stage, vals in self.samples.items():
            arr = np.asarray(vals)
            out[stage] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "count": int(len(arr)),
            }
        return out
