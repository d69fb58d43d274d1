"""Asynchronous incremental SfM engine.

Consumes a monotone stream of labelled events and maintains a continuous
trajectory online: control states are inserted by GP extrapolation at event
timestamps, per-event reprojection factors attach once their bracketing
knots exist, outlier tracks are demoted by mean reprojection error, and the
solver re-optimizes warm from the previous solution, relinearizing only
factors whose variables actually moved.

Incremental solving here is warm-start Gauss-Newton with selective
relinearization, not a Bayes tree; the observable contract is that it
reaches the same optimum as a one-shot batch solve over the same factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam
from . import gp, se3
from .camera import CameraIntrinsics
from .errors import (BootstrapDeferredError, CtsfmError, InvalidArgumentError,
                     MonotonicityError, OutOfRangeError)
from .events import EventObservation
from .gp import ControlState, TrajectoryGP, WnoaPrior
from .graph import (FactorGraph, GraphValues, PointPriorFactor, PoseAnchorFactor,
                    ReprojectionFactor, TranslationNormFactor, VariableIndex,
                    default_pixel_info, landmark_var, state_var)
from .se3 import SE3Pose
from .solver import GnConfig, gauss_newton

SOLVE_TRIGGERS = ("per_event", "per_state", "per_n_events")


@dataclass
class EngineConfig:
    state_insertion_period: float = 0.05   # seconds between control states
    outlier_avg_reproj_px: float = 3.0     # mean track error above this demotes
    min_active_tracks: int = 20            # below this the run is flagged starved
    solve_trigger: str = "per_state"
    events_per_solve: int = 200            # for per_n_events
    pixel_sigma: float = 0.5               # px, reprojection noise sigma
    qc: float = 1.0                        # WNOA power spectral density (diagonal)
    relin_threshold: float = 1e-3          # tangent movement before relinearization
    bootstrap_min_tracks: int = 8
    bootstrap_min_parallax_deg: float = 1.0
    bootstrap_min_pixel_spread_px: float = 5.0  # guards one-point degenerate scenes
    bootstrap_check_every: int = 25        # events between bootstrap attempts
    min_track_events_for_outlier: int = 10
    default_landmark_depth: float = 2.0    # m, for single-ray landmark init
    depth_prior_sigma: float = 100.0       # m, weak landmark prior
    pose_anchor_information: float = 1e8
    scale_information: float = 1e8
    window_states: int | None = None       # fixed-lag width; None = unbounded
    rebuild_every: int = 50                # solves between full system rebuilds
    gn: GnConfig = field(default_factory=GnConfig)

    def __post_init__(self):
        if self.state_insertion_period <= 0:
            raise InvalidArgumentError("state_insertion_period must be positive")
        if self.outlier_avg_reproj_px <= 0:
            raise InvalidArgumentError("outlier_avg_reproj_px must be positive")
        if self.solve_trigger not in SOLVE_TRIGGERS:
            raise InvalidArgumentError(
                f"solve_trigger must be one of {SOLVE_TRIGGERS}, got {self.solve_trigger!r}")


@dataclass
class EventTrack:
    track_id: int
    events: list[EventObservation] = field(default_factory=list)
    landmark: VariableIndex | None = None
    status: str = "active"                 # active | outlier | terminated
    factored: int = 0                      # events turned into factors
    depth_prior_index: int | None = None


class GroundTruthInitializer:
    """Two-view initializer fed by the simulator's ground truth.

    Returns the true relative pose with a configurable perturbation,
    standing in for the out-of-scope minimal solver front-end.
    """

    triangulate = True

    def __init__(self, pose_fn, trans_frac: float = 0.01, rot_deg: float = 0.5,
                 seed: int = 0):
        self._pose_fn = pose_fn            # time -> camera-to-world SE3Pose
        self.trans_frac = trans_frac
        self.rot_deg = rot_deg
        self._rng = np.random.default_rng(seed)

    def relative_pose(self, t0: float, t1: float) -> SE3Pose:
        rel = se3.compose(se3.inverse(self._pose_fn(t0)), self._pose_fn(t1))
        if self.trans_frac == 0 and self.rot_deg == 0:
            return rel
        d = np.zeros(6)
        u = self._rng.normal(size=3)
        d[:3] = self.trans_frac * np.linalg.norm(rel.translation) * u / max(np.linalg.norm(u), 1e-12)
        w = self._rng.normal(size=3)
        d[3:] = np.radians(self.rot_deg) * w / max(np.linalg.norm(w), 1e-12)
        return se3.compose(rel, se3.exp_map(d))


class RandomDepthInitializer:
    """Ground-truth-free initializer: identity relative pose, landmarks from
    first-view bearings at a nominal depth with jitter; refinement does the rest."""

    triangulate = False

    def __init__(self, depth: float = 2.0, jitter: float = 0.2, seed: int = 0):
        self.depth = depth
        self.jitter = jitter
        self._rng = np.random.default_rng(seed)

    def relative_pose(self, t0: float, t1: float) -> SE3Pose:
        return SE3Pose.identity()

    def sample_depth(self) -> float:
        return self.depth + self.jitter * self._rng.standard_normal()


class IncrementalEngine:
    """Streaming MAP estimator realizing the asynchronous back-end contract."""

    def __init__(self, intrinsics: CameraIntrinsics, config: EngineConfig | None = None,
                 initializer=None):
        self.config = config or EngineConfig()
        self.intrinsics = intrinsics
        self.prior = WnoaPrior(self.config.qc)
        self.fg = FactorGraph(intrinsics, self.prior)
        self.values = GraphValues()
        self.initializer = initializer or RandomDepthInitializer()
        self.tracks: dict[int, EventTrack] = {}
        self.pending: list[EventObservation] = []
        self.bootstrapped = False
        self.last_time: float | None = None
        self.event_count = 0
        self.solve_count = 0
        self.demoted_tracks: list[int] = []
        self.cost_history: list[float] = []
        self.track_starvation_flags = 0
        self._events_since_solve = 0
        self._events_since_bootstrap_try = 0
        self._pixel_info = default_pixel_info(self.config.pixel_sigma)
        self._scale_factor_added = False
        self._anchor_mean: SE3Pose | None = None
        self._scale_anchor: np.ndarray | None = None
        self._scale_target: float | None = None

    # -- public queries ------------------------------------------------------

    @property
    def knot_count(self) -> int:
        return len(self.fg.state_times)

    def active_track_count(self) -> int:
        return sum(1 for t in self.tracks.values() if t.status == "active")

    def trajectory(self) -> TrajectoryGP:
        """Snapshot of the current continuous trajectory (last committed solve)."""
        traj = TrajectoryGP(prior=self.prior)
        for i, t in enumerate(self.fg.state_times):
            traj.append(self.values.control_state(i, t))
        return traj

    # -- ingestion -----------------------------------------------------------

    def ingest(self, event: EventObservation) -> dict:
        """Feed one event; returns a summary of the actions taken."""
        if self.last_time is not None and event.timestamp < self.last_time:
            raise MonotonicityError(
                f"event at {event.timestamp} precedes last ingested {self.last_time}")
        self.last_time = event.timestamp
        self.event_count += 1
        actions = {"new_track": False, "new_state": False, "factors": 0,
                   "solved": False, "bootstrapped": False, "demoted": []}

        track = self.tracks.get(event.track_id)
        if track is None:
            track = EventTrack(track_id=event.track_id)
            self.tracks[event.track_id] = track
            actions["new_track"] = True
        if track.events and event.timestamp <= track.events[-1].timestamp:
            raise MonotonicityError(
                f"track {track.track_id} timestamps must strictly increase")
        track.events.append(event)

        if not self.fg.state_times:
            # first event initializes the first control state at t_0
            self.fg.add_state(self.values, event.timestamp, SE3Pose.identity(), np.zeros(6))
            self.pending.append(event)
            return actions

        if not self.bootstrapped:
            self.pending.append(event)
            self._events_since_bootstrap_try += 1
            if self._events_since_bootstrap_try >= self.config.bootstrap_check_every:
                self._events_since_bootstrap_try = 0
                try:
                    self.bootstrap()
                    actions["bootstrapped"] = True
                except BootstrapDeferredError:
                    pass
            return actions

        last_knot = self.fg.state_times[-1]
        if event.timestamp <= last_knot:
            actions["factors"] += self._attach_event(event)
        elif event.timestamp >= last_knot + self.config.state_insertion_period:
            self.insert_control_state(event.timestamp)
            actions["new_state"] = True
            self.pending.append(event)
            actions["factors"] += self._flush_pending()
            if self.config.solve_trigger == "per_state":
                actions["demoted"] = self.remove_outlier_tracks()
                self.resolve("warm")
                actions["solved"] = True
        else:
            self.pending.append(event)

        self._events_since_solve += 1
        if self.config.solve_trigger == "per_event" and not actions["solved"]:
            actions["demoted"] = self.remove_outlier_tracks()
            self.resolve("warm")
            actions["solved"] = True
        elif (self.config.solve_trigger == "per_n_events"
              and self._events_since_solve >= self.config.events_per_solve):
            actions["demoted"] = self.remove_outlier_tracks()
            self.resolve("warm")
            actions["solved"] = True
        return actions

    def finalize(self) -> None:
        """Flush remaining events into the graph and run a closing solve."""
        if not self.bootstrapped:
            return
        if self.pending:
            last_pending = max(e.timestamp for e in self.pending)
            if last_pending > self.fg.state_times[-1]:
                self.insert_control_state(last_pending)
            self._flush_pending()
        self.remove_outlier_tracks()
        self.resolve("warm")

    # -- state insertion -----------------------------------------------------

    def insert_control_state(self, t_c: float) -> VariableIndex:
        """New knot at t_c from GP extrapolation, chained by one prior factor."""
        last_i = len(self.fg.state_times) - 1
        if t_c <= self.fg.state_times[last_i]:
            raise InvalidArgumentError(
                f"control state at {t_c} not after last knot {self.fg.state_times[last_i]}")
        predicted = gp.extrapolate_state(
            self.values.control_state(last_i, self.fg.state_times[last_i]), t_c)
        var = self.fg.add_state(self.values, t_c, predicted.pose, predicted.velocity)
        self.fg.add_gp_prior(state_var(last_i), var)
        if self.config.window_states is not None:
            cutoff = len(self.fg.state_times) - self.config.window_states
            if cutoff > 0:
                self.fg.frozen_before = cutoff
        return var

    def _flush_pending(self) -> int:
        """Attach every pending event whose bracketing knots now exist."""
        last_knot = self.fg.state_times[-1]
        still = []
        created = 0
        for e in self.pending:
            if e.timestamp <= last_knot:
                created += self._attach_event(e)
            else:
                still.append(e)
        self.pending = still
        return created

    def _attach_event(self, event: EventObservation) -> int:
        """Create the reprojection factor for one bracketed event."""
        track = self.tracks[event.track_id]
        if track.status != "active":
            return 0
        times = self.fg.state_times
        if event.timestamp < times[0]:
            raise OutOfRangeError("event precedes the first control state")
        left = int(np.searchsorted(np.asarray(times), event.timestamp, side="right")) - 1
        if left == len(times) - 1:           # exactly at the final knot
            left -= 1
        if track.landmark is None:
            self._init_landmark(track, event)
        f = ReprojectionFactor(pixel=event.pixel_array, timestamp=event.timestamp,
                               track_id=event.track_id, landmark=track.landmark,
                               left_state=state_var(left), right_state=state_var(left + 1),
                               pixel_info=self._pixel_info)
        self.fg.add_reprojection(f)
        track.factored += 1
        return 1

    def _init_landmark(self, track: EventTrack, event: EventObservation,
                       position=None) -> None:
        """Create the track's landmark, by default along the viewing ray."""
        if position is None:
            traj = self.trajectory()
            try:
                pose = traj.interpolate(event.timestamp).pose
            except OutOfRangeError:
                pose = traj.extrapolate(event.timestamp).pose
            depth = (self.initializer.sample_depth()
                     if isinstance(self.initializer, RandomDepthInitializer)
                     else self.config.default_landmark_depth)
            ray = pose.rotation @ self.intrinsics.bearing(event.pixel_array)
            position = pose.translation + depth * ray
        track.landmark = self.fg.add_landmark(self.values, position)
        info = np.eye(3) / self.config.depth_prior_sigma**2
        track.depth_prior_index = self.fg.add_factor(
            PointPriorFactor(landmark=track.landmark, mean=np.asarray(position, float),
                             information=info))

    # -- bootstrap -----------------------------------------------------------

    def _bootstrap_candidates(self):
        t0 = self.fg.state_times[0]
        t_c = self.last_time
        span = t_c - t0
        if span <= 0:
            return [], 0.0, t_c
        out = []
        angles = []
        for track in self.tracks.values():
            if track.status != "active" or len(track.events) < 2:
                continue
            first, last = track.events[0], track.events[-1]
            if first.timestamp > t0 + 0.3 * span or last.timestamp < t_c - 0.3 * span:
                continue
            b0 = self.intrinsics.bearing(first.pixel_array)
            b1 = self.intrinsics.bearing(last.pixel_array)
            angle = np.degrees(np.arccos(np.clip(np.dot(b0, b1), -1.0, 1.0)))
            out.append(track)
            angles.append(angle)
        median = float(np.median(angles)) if angles else 0.0
        return out, median, t_c

    def bootstrap(self) -> None:
        """Two-view initialization followed by a full refinement.

        Raises BootstrapDeferredError while there are not yet enough
        spanning tracks or enough parallax.
        """
        if self.bootstrapped:
            return
        candidates, median_parallax, t_c = self._bootstrap_candidates()
        if len(candidates) < self.config.bootstrap_min_tracks:
            raise BootstrapDeferredError(
                f"{len(candidates)} spanning tracks < {self.config.bootstrap_min_tracks}")
        if median_parallax < self.config.bootstrap_min_parallax_deg:
            raise BootstrapDeferredError(
                f"median parallax {median_parallax:.3f} deg below threshold")
        pix = np.array([t.events[-1].pixel for t in candidates])
        spread = float(np.sqrt(np.mean(np.sum((pix - pix.mean(axis=0))**2, axis=1))))
        if spread < self.config.bootstrap_min_pixel_spread_px:
            raise BootstrapDeferredError(
                f"tracks nearly coincident (pixel spread {spread:.2f} px); "
                "geometry degenerate")

        t0 = self.fg.state_times[0]
        rel = self.initializer.relative_pose(t0, t_c)
        if self.initializer.triangulate and np.linalg.norm(rel.translation) < 1e-4:
            raise BootstrapDeferredError("initializer baseline still near zero")
        vel = se3.log_map(rel).vector / (t_c - t0)
        self.values.vel[0] = vel
        pose1 = se3.compose(self.values.pose(0), rel)
        self.fg.add_state(self.values, t_c, pose1, vel)
        self.fg.add_gp_prior(state_var(0), state_var(1))

        anchor_info = self.config.pose_anchor_information * np.eye(6)
        self._anchor_mean = self.values.pose(0)
        self.fg.add_factor(PoseAnchorFactor(state=state_var(0),
                                            mean=self._anchor_mean, information=anchor_info))
        baseline = float(np.linalg.norm(self.values.trans[1] - self.values.trans[0]))
        if self.initializer.triangulate and baseline > 1e-6:
            self._add_scale_gauge(baseline)

        # landmarks for the spanning tracks, then factors for every pending event
        if self.initializer.triangulate:
            traj = self.trajectory()
            for track in candidates:
                first, last = track.events[0], track.events[-1]
                try:
                    pose_a = se3.inverse(traj.interpolate(first.timestamp).pose)
                    pose_b = se3.inverse(traj.interpolate(last.timestamp).pose)
                    tri = cam.triangulate(pose_a, pose_b, first.pixel_array,
                                          last.pixel_array, self.intrinsics)
                    self._init_landmark(track, first, position=tri.point)
                except CtsfmError:
                    pass  # fall back to ray initialization on first factored event
        self.bootstrapped = True
        self._flush_pending()
        self.resolve("batch")
        # one guarded outlier pass right after refinement: wildly wrong tracks
        # would otherwise drag the young geometry
        if self._demote_above(self.config.outlier_avg_reproj_px * 10.0):
            self.resolve("batch")
        if not self._scale_factor_added:
            baseline = float(np.linalg.norm(self.values.trans[1] - self.values.trans[0]))
            if baseline > 1e-6:
                self._add_scale_gauge(baseline)

    def _add_scale_gauge(self, target: float, anchor=None) -> None:
        self._scale_anchor = (np.asarray(anchor, float) if anchor is not None
                              else self.values.trans[0].copy())
        self._scale_target = float(target)
        self.fg.add_factor(TranslationNormFactor(
            state=state_var(1), anchor=self._scale_anchor, target=self._scale_target,
            information=self.config.scale_information * np.eye(1)))
        self._scale_factor_added = True

    # -- outlier handling ------------------------------------------------------

    def _demote_above(self, threshold: float) -> list[int]:
        errors = self.fg.track_errors(self.values)
        demote = []
        for tid, err in errors.items():
            track = self.tracks[tid]
            if (track.status == "active" and track.factored >= self.config.min_track_events_for_outlier
                    and err > threshold):
                demote.append(tid)
        if demote:
            for tid in demote:
                track = self.tracks[tid]
                track.status = "outlier"
                if track.depth_prior_index is not None:
                    self.fg.disable_simple_factor(track.depth_prior_index)
            self.fg.deactivate_tracks(demote)
            self.demoted_tracks.extend(demote)
        return demote

    def remove_outlier_tracks(self) -> list[int]:
        """Demote tracks whose mean reprojection error exceeds the threshold.

        Demotion is one-way; factors of a demoted track are deactivated and
        its landmark leaves the solve ordering once unconstrained.
        """
        if not self.bootstrapped:
            return []
        demoted = self._demote_above(self.config.outlier_avg_reproj_px)
        if self.active_track_count() < self.config.min_active_tracks:
            self.track_starvation_flags += 1
        return demoted

    # -- solving ---------------------------------------------------------------

    def resolve(self, mode: str = "warm"):
        """Re-optimize: ``warm`` reuses cached linearizations of unmoved
        variables, ``batch`` relinearizes everything."""
        if mode not in ("warm", "batch"):
            raise InvalidArgumentError("mode must be 'warm' or 'batch'")
        threshold = self.config.relin_threshold if mode == "warm" else None
        self.values, report = gauss_newton(self.fg, self.values, self.config.gn,
                                           relin_threshold=threshold)
        self.solve_count += 1
        self._events_since_solve = 0
        self.cost_history.append(report.final_cost)
        if self.fg._solves_since_rebuild >= self.config.rebuild_every:
            self.fg.rebuild_system()
        return report

    # -- checkpointing -----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Replay-compatible JSON dump of knots, landmarks, tracks and config."""
        doc = {
            "format": "ctsfm-engine-checkpoint-v1",
            "config": {k: (v if not isinstance(v, GnConfig) else vars(v))
                       for k, v in vars(self.config).items()},
            "bootstrapped": self.bootstrapped,
            "last_time": self.last_time,
            "event_count": self.event_count,
            "solve_count": self.solve_count,
            "anchor_mean": None if self._anchor_mean is None else
                {"rot": self._anchor_mean.rotation.tolist(),
                 "trans": self._anchor_mean.translation.tolist()},
            "scale_gauge": None if not self._scale_factor_added else
                {"anchor": self._scale_anchor.tolist(), "target": self._scale_target},
            "knots": [
                {"t": t, "rot": self.values.rot[i].tolist(),
                 "trans": self.values.trans[i].tolist(), "vel": self.values.vel[i].tolist()}
                for i, t in enumerate(self.fg.state_times)
            ],
            "landmarks": self.values.lm.tolist(),
            "tracks": [
                {"id": tr.track_id, "status": tr.status,
                 "landmark": None if tr.landmark is None else tr.landmark.ordinal,
                 "factored": tr.factored,
                 "events": [[e.timestamp, e.pixel[0], e.pixel[1], e.polarity]
                            for e in tr.events]}
                for tr in sorted(self.tracks.values(), key=lambda t: t.track_id)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load_checkpoint(cls, path, intrinsics: CameraIntrinsics,
                        initializer=None) -> "IncrementalEngine":
        """Rebuild an engine from a checkpoint; factor set is reconstructed
        deterministically from the stored knots and tracks."""
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "ctsfm-engine-checkpoint-v1":
            raise InvalidArgumentError("not a ctsfm engine checkpoint")
        cfg_raw = dict(doc["config"])
        gn_raw = cfg_raw.pop("gn", None)
        config = EngineConfig(**cfg_raw)
        if gn_raw:
            config.gn = GnConfig(**gn_raw)
        eng = cls(intrinsics, config, initializer=initializer)
        eng.bootstrapped = doc["bootstrapped"]
        eng.last_time = doc["last_time"]
        eng.event_count = doc["event_count"]
        eng.solve_count = doc["solve_count"]
        for knot in doc["knots"]:
            eng.fg.add_state(eng.values, knot["t"],
                             SE3Pose(np.array(knot["rot"]), np.array(knot["trans"])),
                             np.array(knot["vel"]))
        landmarks = np.array(doc["landmarks"]).reshape(-1, 3)
        lm_vars = [eng.fg.add_landmark(eng.values, p) for p in landmarks]
        for i in range(1, len(eng.fg.state_times)):
            eng.fg.add_gp_prior(state_var(i - 1), state_var(i))
        if doc["anchor_mean"] is not None:
            eng._anchor_mean = SE3Pose(np.array(doc["anchor_mean"]["rot"]),
                                       np.array(doc["anchor_mean"]["trans"]))
            eng.fg.add_factor(PoseAnchorFactor(
                state=state_var(0), mean=eng._anchor_mean,
                information=config.pose_anchor_information * np.eye(6)))
        for tr in doc["tracks"]:
            track = EventTrack(track_id=tr["id"], status=tr["status"],
                               factored=0)
            if tr["landmark"] is not None:
                track.landmark = lm_vars[tr["landmark"]]
                info = np.eye(3) / config.depth_prior_sigma**2
                track.depth_prior_index = eng.fg.add_factor(PointPriorFactor(
                    landmark=track.landmark, mean=landmarks[tr["landmark"]].copy(),
                    information=info))
            for t, u, v, p in tr["events"]:
                track.events.append(EventObservation(pixel=(u, v), timestamp=t,
                                                     polarity=int(p), track_id=tr["id"]))
            eng.tracks[tr["id"]] = track
        # reconstruct factors for bracketed events of active tracks
        if eng.bootstrapped:
            last_knot = eng.fg.state_times[-1]
            for track in eng.tracks.values():
                for e in track.events:
                    if e.timestamp <= last_knot and track.landmark is not None \
                            and track.status == "active":
                        eng._attach_event_loaded(track, e)
                    elif e.timestamp > last_knot:
                        eng.pending.append(e)
            eng.pending.sort(key=lambda e: e.timestamp)
            if doc["scale_gauge"] is not None:
                eng._add_scale_gauge(doc["scale_gauge"]["target"],
                                     anchor=doc["scale_gauge"]["anchor"])
            for track in eng.tracks.values():
                if track.status == "outlier" and track.depth_prior_index is not None:
                    eng.fg.disable_simple_factor(track.depth_prior_index)
        return eng

    def _attach_event_loaded(self, track: EventTrack, event: EventObservation):
        times = self.fg.state_times
        left = int(np.searchsorted(np.asarray(times), event.timestamp, side="right")) - 1
        if left == len(times) - 1:
            left -= 1
        if left < 0:
            return
        self.fg.add_reprojection(ReprojectionFactor(
            pixel=event.pixel_array, timestamp=event.timestamp, track_id=track.track_id,
            landmark=track.landmark, left_state=state_var(left),
            right_state=state_var(left + 1), pixel_info=self._pixel_info))
        track.factored += 1
