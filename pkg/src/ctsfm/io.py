"""File formats: event streams, trajectories, scenario configs, run reports.

Event stream: text, one event per line, ``timestamp x y polarity [track_id]``
(space separated, timestamps with 9 decimal digits).  Columns match the
public event-camera dataset ``events.txt`` layout; the track id column is
our extension and is absent for real recordings.  Polarity is written as
-1/+1; 0/1 is accepted on read and mapped to -1/+1.

Trajectory: ``timestamp tx ty tz qx qy qz qw`` with normalized Hamilton
quaternions, camera-to-world.

Scenario config: YAML (schema in the README); reports: flat ``key = value``
lines for diffable assertions.
"""

from __future__ import annotations

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics
from .errors import InvalidArgumentError, ScenarioConfigError, UnsupportedInputError
from .events import EventObservation
from .metrics import PoseSeries
from .se3 import SE3Pose
from .sim import SimScenario, make_trajectory


# ---------------------------------------------------------------------------
# event streams
# ---------------------------------------------------------------------------

def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(f"{e.timestamp:.9f} {e.pixel[0]:.6f} {e.pixel[1]:.6f} "
                     f"{e.polarity:+d} {e.track_id}\n")


def read_events(path) -> list[EventObservation]:
    """Parse an event stream file; events without a track id get track_id -1."""
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) not in (4, 5):
                raise InvalidArgumentError(
                    f"{path}:{lineno}: expected 4 or 5 columns, got {len(parts)}")
            t, x, y = float(parts[0]), float(parts[1]), float(parts[2])
            pol = int(float(parts[3]))
            if pol == 0:
                pol = -1
            track = int(parts[4]) if len(parts) == 5 else -1
            events.append(EventObservation(pixel=(x, y), timestamp=t,
                                           polarity=1 if pol > 0 else -1,
                                           track_id=track))
    return events


def require_track_ids(events) -> None:
    if any(e.track_id < 0 for e in events):
        raise UnsupportedInputError(
            "stream has events without track ids; real-data feature tracking is "
            "out of scope, supply a labelled stream")


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def write_trajectory(path, series: PoseSeries) -> None:
    with open(path, "w") as fh:
        for t, pose in zip(series.timestamps, series.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # (x, y, z, w)
            p = pose.translation
            fh.write(f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_trajectory(path) -> PoseSeries:
    times, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise InvalidArgumentError(
                    f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
            vals = [float(v) for v in parts]
            q = np.array(vals[4:8])
            n = np.linalg.norm(q)
            if not 0.99 < n < 1.01:
                raise InvalidArgumentError(f"{path}:{lineno}: quaternion not normalized")
            times.append(vals[0])
            poses.append(SE3Pose(Rotation.from_quat(q / n).as_matrix(),
                                 np.array(vals[1:4])))
    if not times:
        raise InvalidArgumentError(f"{path}: empty trajectory file")
    return PoseSeries(times, poses)


# ---------------------------------------------------------------------------
# scenario configs
# ---------------------------------------------------------------------------

def _require(doc, field, kind, default=None):
    cur = doc
    for part in field.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if default is not None:
                return default
            raise ScenarioConfigError(field, "missing required field")
        cur = cur[part]
    if kind is float and isinstance(cur, int):
        cur = float(cur)
    if not isinstance(cur, kind):
        raise ScenarioConfigError(field, f"expected {kind.__name__}, got {type(cur).__name__}")
    return cur


def load_scenario(path) -> SimScenario:
    """Parse and validate a YAML scenario config; errors name the field."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioConfigError("(document)", f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioConfigError("(document)", "top level must be a mapping")
    seed = _require(doc, "seed", int)
    duration = _require(doc, "duration", float)
    traj_type = _require(doc, "trajectory.type", str)
    traj_params = doc.get("trajectory", {}).get("params", {}) or {}
    if not isinstance(traj_params, dict):
        raise ScenarioConfigError("trajectory.params", "must be a mapping")
    lm = doc.get("landmarks", {})
    intr = doc.get("intrinsics", {})
    noise = doc.get("noise", {})
    try:
        intrinsics = CameraIntrinsics(
            fx=_require(doc, "intrinsics.fx", float, 320.0) if intr else 320.0,
            fy=_require(doc, "intrinsics.fy", float, 320.0) if intr else 320.0,
            cx=_require(doc, "intrinsics.cx", float, 160.0) if intr else 160.0,
            cy=_require(doc, "intrinsics.cy", float, 120.0) if intr else 120.0,
            width=_require(doc, "intrinsics.width", int, 320) if intr else 320,
            height=_require(doc, "intrinsics.height", int, 240) if intr else 240)
    except InvalidArgumentError as exc:
        raise ScenarioConfigError("intrinsics", str(exc)) from None
    box_min = lm.get("box_min", (-1.0, -0.8, 1.8))
    box_max = lm.get("box_max", (1.0, 0.8, 3.2))
    if len(box_min) != 3 or len(box_max) != 3:
        raise ScenarioConfigError("landmarks.box_min", "boxes need 3 components")
    return SimScenario(
        trajectory=make_trajectory(traj_type, traj_params),
        duration=duration,
        landmark_count=int(lm.get("count", 30)),
        landmark_box_min=tuple(float(v) for v in box_min),
        landmark_box_max=tuple(float(v) for v in box_max),
        intrinsics=intrinsics,
        pixel_noise_sigma=float(noise.get("pixel_sigma", 0.5)),
        event_threshold_px=float(noise.get("event_threshold_px", 1.0)),
        outlier_track_fraction=float(noise.get("outlier_track_fraction", 0.0)),
        seed=seed,
        gt_sample_hz=float(doc.get("gt_sample_hz", 100.0)))


# ---------------------------------------------------------------------------
# flat key = value reports
# ---------------------------------------------------------------------------

def write_report(path, fields: dict) -> None:
    with open(path, "w") as fh:
        for key, value in fields.items():
            if isinstance(value, float):
                fh.write(f"{key} = {value:.12g}\n")
            elif isinstance(value, (list, tuple)):
                fh.write(f"{key} = {','.join(f'{v:.12g}' for v in value)}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, raw = line.partition("=")
            out[key.strip()] = raw.strip()
    return out
