"""Frame-based baseline: batch events into frames, then bundle-adjust.

Reuses the factor graph with zero-velocity states (velocities pinned by
strong priors, no motion prior between frames) and the same gauge fixing as
the asynchronous back-end.  Frames below the usable track count are skipped
and reported; that is the failure mode fixed batching exhibits on uneven
streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camera as cam
from . import se3
from .camera import CameraIntrinsics
from .errors import CtsfmError, InvalidArgumentError
from .graph import (FactorGraph, FrameReprojectionFactor, GraphValues,
                    PointPriorFactor, PoseAnchorFactor, TranslationNormFactor,
                    VelocityPriorFactor, landmark_var, state_var)
from .metrics import PoseSeries
from .se3 import SE3Pose
from .solver import GnConfig, gauss_newton

VELOCITY_PIN_INFO = 1e6
ANCHOR_INFO = 1e8
SCALE_INFO = 1e8
DEPTH_PRIOR_SIGMA = 100.0


@dataclass
class BaselineReport:
    n_frames: int = 0
    usable_frames: int = 0
    unusable_frames: int = 0
    iterations: int = 0
    final_cost: float = 0.0
    mean_reproj_px: float = float("nan")
    cost_trace: list = field(default_factory=list)


def frame_based_ba(frames, intrinsics: CameraIntrinsics, initializer,
                   pixel_sigma: float = 0.5, default_depth: float = 2.0,
                   gn: GnConfig | None = None):
    """Bundle-adjust the usable frames; returns (PoseSeries, landmarks, report).

    Frame poses initialize incrementally (each frame starts at the previous
    solution and is refined before the next arrives), then a final batch
    solve polishes everything, mirroring how the asynchronous engine ends
    with a converged MAP estimate over the same measurements.
    """
    usable = [f for f in frames if f.usable]
    report = BaselineReport(n_frames=len(frames), usable_frames=len(usable),
                            unusable_frames=len(frames) - len(usable))
    if len(usable) < 2:
        raise InvalidArgumentError(
            f"need at least 2 usable frames, got {len(usable)} of {len(frames)}")

    fg = FactorGraph(intrinsics)
    values = GraphValues()
    lm_of_track: dict[int, int] = {}
    vel_info = VELOCITY_PIN_INFO * np.eye(6)

    def add_frame_state(t, pose):
        var = fg.add_state(values, t, pose, np.zeros(6))
        fg.add_factor(VelocityPriorFactor(state=var, mean=np.zeros(6),
                                          information=vel_info))
        return var

    def ray_landmark(track_id, pixel, pose):
        ray = pose.rotation @ intrinsics.bearing(np.asarray(pixel, float))
        pos = pose.translation + default_depth * ray
        var = fg.add_landmark(values, pos)
        fg.add_factor(PointPriorFactor(landmark=var, mean=pos.copy(),
                                       information=np.eye(3) / DEPTH_PRIOR_SIGMA**2))
        lm_of_track[track_id] = var.ordinal
        return var

    def add_observations(frame, state):
        for tid, pixel in frame.track_pixels.items():
            n = frame.track_counts[tid]
            info = (n / pixel_sigma**2) * np.eye(2)  # averaging n events shrinks noise
            if tid not in lm_of_track:
                ray_landmark(tid, pixel, values.pose(state.ordinal))
            fg.add_factor(FrameReprojectionFactor(
                pixel=np.asarray(pixel, float), state=state,
                landmark=landmark_var(lm_of_track[tid]), pixel_info=info,
                intrinsics=intrinsics))

    f0, f1 = usable[0], usable[1]
    s0 = add_frame_state(f0.timestamp, SE3Pose.identity())
    fg.add_factor(PoseAnchorFactor(state=s0, mean=SE3Pose.identity(),
                                   information=ANCHOR_INFO * np.eye(6)))
    rel = initializer.relative_pose(f0.timestamp, f1.timestamp)
    s1 = add_frame_state(f1.timestamp, rel)
    baseline_len = float(np.linalg.norm(rel.translation))
    if initializer.triangulate and baseline_len > 1e-6:
        fg.add_factor(TranslationNormFactor(state=s1, anchor=np.zeros(3),
                                            target=baseline_len,
                                            information=SCALE_INFO * np.eye(1)))
    # two-view landmarks: triangulate where both frames saw the track
    shared = sorted(set(f0.track_pixels) & set(f1.track_pixels))
    for tid in shared:
        if initializer.triangulate:
            try:
                tri = cam.triangulate(se3.inverse(values.pose(0)),
                                      se3.inverse(values.pose(1)),
                                      np.asarray(f0.track_pixels[tid], float),
                                      np.asarray(f1.track_pixels[tid], float),
                                      intrinsics)
                var = fg.add_landmark(values, tri.point)
                fg.add_factor(PointPriorFactor(landmark=var, mean=tri.point.copy(),
                                               information=np.eye(3) / DEPTH_PRIOR_SIGMA**2))
                lm_of_track[tid] = var.ordinal
                continue
            except CtsfmError:
                pass
        ray_landmark(tid, f0.track_pixels[tid], values.pose(0))
    add_observations(f0, s0)
    add_observations(f1, s1)
    values, rep = gauss_newton(fg, values, gn or GnConfig())
    report.iterations += rep.iterations
    report.cost_trace.extend(rep.cost_trace)

    for frame in usable[2:]:
        prev = values.pose(values.n_states - 1)
        s = add_frame_state(frame.timestamp, prev)
        add_observations(frame, s)
        values, rep = gauss_newton(fg, values, gn or GnConfig(),
                                   relin_threshold=1e-3)
        report.iterations += rep.iterations
        report.cost_trace.extend(rep.cost_trace)

    # closing batch solve over everything
    values, rep = gauss_newton(fg, values, gn or GnConfig())
    report.iterations += rep.iterations
    report.final_cost = rep.final_cost
    report.cost_trace.extend(rep.cost_trace)
    report.mean_reproj_px = _mean_frame_reproj(fg, values)

    series = PoseSeries([f.timestamp for f in usable],
                        [values.pose(i) for i in range(values.n_states)])
    landmarks = {tid: values.lm[ord_].copy() for tid, ord_ in lm_of_track.items()}
    return series, landmarks, report


def _mean_frame_reproj(fg: FactorGraph, values: GraphValues) -> float:
    errs = []
    for i, f in enumerate(fg.simple_factors):
        if isinstance(f, FrameReprojectionFactor) and fg._simple_enabled[i]:
            lin = f.linearize(values, fg.state_times)
            if lin.active:
                errs.append(float(np.linalg.norm(lin.residual)))
    return float(np.mean(errs)) if errs else float("nan")
