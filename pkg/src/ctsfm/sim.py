"""Deterministic event simulator and the frame-batching baseline.

Events follow a geometric displacement model: a track (one 3D dot observed
over time) emits an event whenever its noise-free projection has moved a
threshold distance in the image since the track's previous event.  The
event rate is therefore proportional to image-plane speed, so a
decelerating camera produces a thinning stream.  Pixel noise, polarity
from the dominant motion axis, and uniform-random outlier tracks are
layered on top.  Identical scenario + seed gives a bit-identical stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .camera import CameraIntrinsics
from .errors import EmptyStreamError, InvalidArgumentError, ScenarioConfigError
from .events import EventObservation
from .metrics import PoseSeries
from .se3 import SE3Pose

FINE_GRID_HZ = 2000.0     # sampling rate for locating displacement crossings
VELOCITY_STEP = 1e-5      # central-difference step for ground-truth velocity


# ---------------------------------------------------------------------------
# analytic ground-truth trajectories
# ---------------------------------------------------------------------------

class AnalyticTrajectory:
    """Base: closed-form camera-to-world pose as a function of time."""

    def pose(self, t: float) -> SE3Pose:
        R, p = self.pose_arrays(np.array([t]))
        return SE3Pose(R[0], p[0])

    def pose_arrays(self, times: np.ndarray):
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        """Body twist via symmetric difference (convention-proof)."""
        h = VELOCITY_STEP
        d = se3.local_coordinates(self.pose(t - h), self.pose(t + h)).vector
        return d / (2.0 * h)

    def series(self, times) -> PoseSeries:
        R, p = self.pose_arrays(np.asarray(times, float))
        return PoseSeries(times, [SE3Pose(R[i], p[i]) for i in range(len(times))])


def _yaw_pitch_rotations(yaw, pitch):
    """Rotations about the camera y (yaw) then x (pitch) axes, batched."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    n = len(yaw)
    Ry = np.zeros((n, 3, 3))
    Ry[:, 0, 0] = cy
    Ry[:, 0, 2] = sy
    Ry[:, 1, 1] = 1.0
    Ry[:, 2, 0] = -sy
    Ry[:, 2, 2] = cy
    Rx = np.zeros((n, 3, 3))
    Rx[:, 0, 0] = 1.0
    Rx[:, 1, 1] = cp
    Rx[:, 1, 2] = -sp
    Rx[:, 2, 1] = sp
    Rx[:, 2, 2] = cp
    return Ry @ Rx


@dataclass
class CircleTrajectory(AnalyticTrajectory):
    """Constant-speed translation around a circle in the xy plane, fixed attitude."""

    radius: float = 0.3
    period: float = 4.0

    def pose_arrays(self, times):
        w = 2.0 * math.pi / self.period
        p = np.stack([self.radius * (np.cos(w * times) - 1.0),
                      self.radius * np.sin(w * times),
                      np.zeros_like(times)], axis=1)
        R = np.broadcast_to(np.eye(3), (len(times), 3, 3)).copy()
        return R, p


@dataclass
class FigureEightTrajectory(AnalyticTrajectory):
    """Lissajous translation with gentle yaw/pitch nodding."""

    amp_x: float = 0.35
    amp_y: float = 0.22
    amp_z: float = 0.08
    period: float = 5.0
    yaw_amp_deg: float = 4.0
    pitch_amp_deg: float = 2.5

    def pose_arrays(self, times):
        w = 2.0 * math.pi / self.period
        p = np.stack([self.amp_x * np.sin(w * times),
                      self.amp_y * np.sin(2.0 * w * times),
                      self.amp_z * np.sin(w * times + 0.5)], axis=1)
        yaw = np.radians(self.yaw_amp_deg) * np.sin(w * times + 0.3)
        pitch = np.radians(self.pitch_amp_deg) * np.sin(2.0 * w * times)
        return _yaw_pitch_rotations(yaw, pitch), p


@dataclass
class DeceleratingLineTrajectory(AnalyticTrajectory):
    """Straight line with exponentially decaying speed: dense events early,
    sparse events late."""

    v0: float = 0.8
    decay: float = 0.8

    def pose_arrays(self, times):
        d = self.v0 / self.decay * (1.0 - np.exp(-self.decay * times))
        p = np.stack([d, np.zeros_like(times), np.zeros_like(times)], axis=1)
        R = np.broadcast_to(np.eye(3), (len(times), 3, 3)).copy()
        return R, p


@dataclass
class SweepTrajectory(AnalyticTrajectory):
    """Repetitive side-to-side sweep with nodding, the robot-arm-like regime."""

    amp: float = 0.3
    lift: float = 0.06
    period: float = 2.5
    yaw_amp_deg: float = 5.0

    def pose_arrays(self, times):
        w = 2.0 * math.pi / self.period
        p = np.stack([self.amp * np.sin(w * times),
                      np.zeros_like(times),
                      self.lift * (1.0 - np.cos(w * times))], axis=1)
        yaw = np.radians(self.yaw_amp_deg) * np.sin(w * times)
        return _yaw_pitch_rotations(yaw, np.zeros_like(times)), p


TRAJECTORY_TYPES = {
    "circle": CircleTrajectory,
    "figure_eight": FigureEightTrajectory,
    "decelerating_line": DeceleratingLineTrajectory,
    "sweep": SweepTrajectory,
}


def make_trajectory(kind: str, params: dict | None = None) -> AnalyticTrajectory:
    if kind not in TRAJECTORY_TYPES:
        raise ScenarioConfigError("trajectory.type",
                                  f"unknown type {kind!r}; choose from {sorted(TRAJECTORY_TYPES)}")
    try:
        return TRAJECTORY_TYPES[kind](**(params or {}))
    except TypeError as exc:
        raise ScenarioConfigError("trajectory.params", str(exc)) from None


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

DEFAULT_INTRINSICS = CameraIntrinsics(fx=320.0, fy=320.0, cx=160.0, cy=120.0,
                                      width=320, height=240)


@dataclass
class SimScenario:
    """Everything needed to synthesize a labelled event stream deterministically."""

    trajectory: AnalyticTrajectory = field(default_factory=FigureEightTrajectory)
    duration: float = 5.0
    landmark_count: int = 30
    landmark_box_min: tuple = (-1.0, -0.8, 1.8)
    landmark_box_max: tuple = (1.0, 0.8, 3.2)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    pixel_noise_sigma: float = 0.5
    event_threshold_px: float = 1.0
    outlier_track_fraction: float = 0.0
    seed: int = 0
    gt_sample_hz: float = 100.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioConfigError("duration", "must be positive")
        if self.landmark_count < 1:
            raise ScenarioConfigError("landmarks.count", "must be at least 1")
        if self.pixel_noise_sigma < 0:
            raise ScenarioConfigError("noise.pixel_sigma", "must be non-negative")
        if self.event_threshold_px <= 0:
            raise ScenarioConfigError("noise.event_threshold_px", "must be positive")
        if not 0.0 <= self.outlier_track_fraction <= 1.0:
            raise ScenarioConfigError("noise.outlier_track_fraction", "must be in [0, 1]")

    def sample_landmarks(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        lo = np.asarray(self.landmark_box_min, float)
        hi = np.asarray(self.landmark_box_max, float)
        return rng.uniform(lo, hi, size=(self.landmark_count, 3))

    def ground_truth(self) -> PoseSeries:
        n = max(2, int(round(self.duration * self.gt_sample_hz)) + 1)
        return self.trajectory.series(np.linspace(0.0, self.duration, n))


@dataclass
class SimResult:
    events: list
    ground_truth: PoseSeries
    landmarks: np.ndarray
    outlier_track_ids: list
    trajectory: AnalyticTrajectory


def generate_events(scenario: SimScenario) -> SimResult:
    """Synthesize the labelled event stream for a scenario.

    Track id j corresponds to landmark j.  Events are globally time-sorted
    (ties broken by track id) and strictly increasing within each track.
    """
    traj = scenario.trajectory
    k = scenario.intrinsics
    landmarks = scenario.sample_landmarks()
    n_grid = max(64, int(round(scenario.duration * FINE_GRID_HZ)) + 1)
    grid = np.linspace(0.0, scenario.duration, n_grid)
    R, p = traj.pose_arrays(grid)

    # camera-frame landmarks over the grid: (G, L, 3)
    rel = landmarks[None, :, :] - p[:, None, :]
    xc = np.einsum("gji,glj->gli", R, rel)
    in_front = xc[:, :, 2] > 1e-3
    front_frac = in_front.mean(axis=0)
    if np.mean(front_frac) < 0.9:
        raise InvalidArgumentError(
            f"landmarks in front of the camera only {np.mean(front_frac):.1%} of the time; "
            "scenario must keep the scene visible >= 90%")

    z = np.where(in_front, xc[:, :, 2], 1.0)
    u = k.fx * xc[:, :, 0] / z + k.cx
    v = k.fy * xc[:, :, 1] / z + k.cy
    in_fov = (in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height))

    rng = np.random.default_rng(scenario.seed + 1)
    n_outliers = int(math.floor(scenario.outlier_track_fraction * scenario.landmark_count))
    outlier_ids = sorted(rng.choice(scenario.landmark_count, size=n_outliers,
                                    replace=False).tolist()) if n_outliers else []
    outlier_set = set(outlier_ids)

    events = []
    for j in range(scenario.landmark_count):
        ok = in_fov[:, j]
        du = np.diff(u[:, j])
        dv = np.diff(v[:, j])
        step = np.hypot(du, dv)
        step = np.where(ok[:-1] & ok[1:], step, 0.0)   # no motion credit off-screen
        cum = np.concatenate([[0.0], np.cumsum(step)])
        n_events = int(cum[-1] // scenario.event_threshold_px)
        if n_events == 0:
            continue
        targets = scenario.event_threshold_px * np.arange(1, n_events + 1)
        seg = np.searchsorted(cum, targets, side="left")
        seg = np.clip(seg, 1, n_grid - 1)
        denom = np.where(step[seg - 1] > 0, step[seg - 1], 1.0)
        frac = (targets - cum[seg - 1]) / denom
        t_ev = grid[seg - 1] + frac * (grid[seg] - grid[seg - 1])
        t_ev = np.maximum.accumulate(t_ev)  # guard against flat-segment ties
        keep = np.concatenate([[True], np.diff(t_ev) > 1e-12])
        t_ev = t_ev[keep]
        # exact noise-free projection at the event times
        R_e, p_e = traj.pose_arrays(t_ev)
        xc_e = np.einsum("nji,nj->ni", R_e, landmarks[j] - p_e)
        good = xc_e[:, 2] > 1e-3
        pix = np.stack([k.fx * xc_e[:, 0] / np.where(good, xc_e[:, 2], 1.0) + k.cx,
                        k.fy * xc_e[:, 1] / np.where(good, xc_e[:, 2], 1.0) + k.cy],
                       axis=1)
        if j in outlier_set:
            pix = rng.uniform([0.0, 0.0], [k.width - 1e-6, k.height - 1e-6],
                              size=pix.shape)
        else:
            pix = pix + rng.normal(0.0, scenario.pixel_noise_sigma, size=pix.shape)
        inside = (good & (pix[:, 0] >= 0) & (pix[:, 0] < k.width)
                  & (pix[:, 1] >= 0) & (pix[:, 1] < k.height))
        # polarity from the dominant axis of inter-event motion
        prev = None
        for t, (pu, pv), ok_i in zip(t_ev, pix, inside):
            if not ok_i:
                prev = (pu, pv)
                continue
            if prev is None:
                pol = 1
            else:
                d0, d1 = pu - prev[0], pv - prev[1]
                dom = d0 if abs(d0) >= abs(d1) else d1
                pol = 1 if dom >= 0 else -1
            events.append(EventObservation(pixel=(float(pu), float(pv)),
                                           timestamp=float(t), polarity=pol,
                                           track_id=j))
            prev = (pu, pv)

    if not events:
        raise EmptyStreamError("scenario produced no events (scene not visible)")
    events.sort(key=lambda e: (e.timestamp, e.track_id))
    return SimResult(events=events, ground_truth=scenario.ground_truth(),
                     landmarks=landmarks, outlier_track_ids=outlier_ids,
                     trajectory=traj)


# ---------------------------------------------------------------------------
# batching baseline
# ---------------------------------------------------------------------------

USABLE_MIN_TRACKS = 8


@dataclass
class EventFrame:
    """Events accumulated over a window, reduced to per-track mean pixels."""

    timestamp: float
    track_pixels: dict            # track id -> mean pixel (2,)
    track_counts: dict            # track id -> events averaged
    n_events: int
    t_start: float
    t_end: float
    track_spread_px: float        # mean per-track RMS distance to the track mean

    @property
    def usable(self) -> bool:
        return len(self.track_pixels) >= USABLE_MIN_TRACKS

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


def _make_frame(evts, t_start, t_end) -> EventFrame:
    by_track: dict[int, list] = {}
    for e in evts:
        by_track.setdefault(e.track_id, []).append(e.pixel)
    pixels = {}
    counts = {}
    spreads = []
    for tid, pxs in by_track.items():
        arr = np.asarray(pxs, float)
        mean = arr.mean(axis=0)
        pixels[tid] = mean
        counts[tid] = len(arr)
        if len(arr) > 1:
            spreads.append(float(np.sqrt(np.mean(np.sum((arr - mean)**2, axis=1)))))
    ts = float(np.mean([e.timestamp for e in evts])) if evts else 0.5 * (t_start + t_end)
    return EventFrame(timestamp=ts, track_pixels=pixels, track_counts=counts,
                      n_events=len(evts), t_start=t_start, t_end=t_end,
                      track_spread_px=float(np.mean(spreads)) if spreads else 0.0)


def batch_events(events, mode: str = "fixed_duration", duration: float = 0.1,
                 count: int = 1000) -> list[EventFrame]:
    """Accumulate events into frames by time window or by event count.

    Empty or thin windows still produce frames (flagged unusable), which is
    exactly the failure mode of fixed batching on uneven streams.
    """
    if not events:
        raise InvalidArgumentError("cannot batch an empty stream")
    frames = []
    if mode == "fixed_duration":
        if duration <= 0:
            raise InvalidArgumentError("batch duration must be positive")
        t0 = events[0].timestamp
        t1 = events[-1].timestamp
        n_frames = max(1, int(math.ceil((t1 - t0) / duration + 1e-12)))
        buckets: list[list] = [[] for _ in range(n_frames)]
        for e in events:
            i = min(int((e.timestamp - t0) / duration), n_frames - 1)
            buckets[i].append(e)
        for i, bucket in enumerate(buckets):
            frames.append(_make_frame(bucket, t0 + i * duration, t0 + (i + 1) * duration))
    elif mode == "fixed_count":
        if count < 1:
            raise InvalidArgumentError("batch count must be at least 1")
        for lo in range(0, len(events), count):
            chunk = events[lo:lo + count]
            frames.append(_make_frame(chunk, chunk[0].timestamp, chunk[-1].timestamp))
    else:
        raise InvalidArgumentError("mode must be 'fixed_duration' or 'fixed_count'")
    return frames
