"""Trajectory accuracy metrics: absolute and relative pose error.

ATE is the RMSE of translation residuals after the best rigid SE(3)
alignment of the estimate onto the ground truth (Umeyama without scale);
RPE is the RMSE of relative-pose translation errors over a fixed time
delta.  Estimates are compared at the ground-truth sample times; sampling
outside an estimate's span holds the nearest endpoint, so a trajectory
that dies early honestly accrues error over the uncovered tail.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import InvalidArgumentError, OutOfRangeError
from .se3 import SE3Pose


class PoseSeries:
    """Discrete timestamped poses (camera-to-world) with geodesic interpolation."""

    def __init__(self, timestamps, poses):
        self.timestamps = np.asarray(timestamps, dtype=float)
        self.poses = list(poses)
        if len(self.timestamps) != len(self.poses):
            raise InvalidArgumentError("timestamps and poses length mismatch")
        if len(self.timestamps) == 0:
            raise InvalidArgumentError("pose series cannot be empty")
        if np.any(np.diff(self.timestamps) <= 0):
            raise InvalidArgumentError("pose series timestamps must strictly increase")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def span(self):
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def sample(self, t: float) -> SE3Pose:
        """Pose at t: SE(3) geodesic between neighbours, clamped at the ends."""
        ts = self.timestamps
        if t <= ts[0]:
            return self.poses[0]
        if t >= ts[-1]:
            return self.poses[-1]
        i = bisect_right(ts, t) - 1
        if ts[i] == t:
            return self.poses[i]
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        step = se3.local_coordinates(self.poses[i], self.poses[i + 1]).vector
        return se3.retract(self.poses[i], w * step)

    def sample_many(self, times) -> "PoseSeries":
        return PoseSeries(times, [self.sample(t) for t in times])


def path_length(positions: np.ndarray) -> float:
    d = np.diff(np.asarray(positions, float), axis=0)
    return float(np.sum(np.linalg.norm(d, axis=1)))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> SE3Pose:
    """Rigid transform g minimizing sum ||g(src_i) - dst_i||^2 (no scale)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidArgumentError("alignment needs matching (N, 3) point sets")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return SE3Pose(R, t)


@dataclass
class TrajectoryMetrics:
    ate_m: float
    rpe_m: float
    alignment: SE3Pose
    n_samples: int


def absolute_trajectory_error(est: PoseSeries, gt: PoseSeries,
                              alignment="best_fit") -> tuple[float, SE3Pose]:
    """RMSE of aligned position residuals at the ground-truth timestamps.

    ``alignment`` is "best_fit" (Umeyama), None (identity) or an explicit
    SE3Pose applied to the estimate.
    """
    est_at_gt = est.sample_many(gt.timestamps)
    p_est = est_at_gt.positions
    p_gt = gt.positions
    if alignment == "best_fit":
        g = umeyama_alignment(p_est, p_gt)
    elif alignment is None:
        g = SE3Pose.identity()
    elif isinstance(alignment, SE3Pose):
        g = alignment
    else:
        raise InvalidArgumentError("alignment must be 'best_fit', None or an SE3Pose")
    res = p_est @ g.rotation.T + g.translation - p_gt
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1)))), g


def relative_pose_error(est: PoseSeries, gt: PoseSeries, delta: float = 0.1) -> float:
    """RMSE of relative translation error over the fixed time delta."""
    if delta <= 0:
        raise InvalidArgumentError("rpe delta must be positive")
    ts = gt.timestamps
    est_at_gt = est.sample_many(ts)
    tol = 0.25 * float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0
    errors = []
    j = 0
    for i in range(len(ts)):
        target = ts[i] + delta
        while j < len(ts) and ts[j] < target - tol:
            j += 1
        if j >= len(ts):
            break
        if abs(ts[j] - target) > tol:
            continue
        rel_gt = se3.compose(se3.inverse(gt.poses[i]), gt.poses[j])
        rel_est = se3.compose(se3.inverse(est_at_gt.poses[i]), est_at_gt.poses[j])
        err = se3.compose(se3.inverse(rel_gt), rel_est)
        errors.append(np.linalg.norm(err.translation))
    if not errors:
        raise OutOfRangeError("no sample pairs at the requested rpe delta")
    return float(np.sqrt(np.mean(np.square(errors))))


def trajectory_errors(est: PoseSeries, gt: PoseSeries, alignment="best_fit",
                      rpe_delta: float = 0.1) -> TrajectoryMetrics:
    """ATE and RPE of an estimate against ground truth.

    Requires overlapping time spans; the estimate is sampled at every
    ground-truth timestamp (held at its endpoints outside its span).
    """
    e0, e1 = est.span()
    g0, g1 = gt.span()
    if e1 < g0 or g1 < e0:
        raise OutOfRangeError(
            f"no temporal overlap between estimate [{e0}, {e1}] and ground truth [{g0}, {g1}]")
    ate, g = absolute_trajectory_error(est, gt, alignment)
    rpe = relative_pose_error(est, gt, delta=rpe_delta)
    return TrajectoryMetrics(ate_m=ate, rpe_m=rpe, alignment=g, n_samples=len(gt))
