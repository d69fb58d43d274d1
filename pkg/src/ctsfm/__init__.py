"""Continuous-time structure from motion for event cameras.

A GP motion prior on SE(3) with O(1) interpolation, per-event MAP factor
graphs solved by sparse block-Cholesky Gauss-Newton, an incremental
warm-start engine, and a deterministic event simulator with a frame-based
batching baseline for verification.
"""

from .camera import CameraIntrinsics, Triangulation, project, project_jacobians, triangulate
from .engine import (EngineConfig, EventTrack, GroundTruthInitializer,
                     IncrementalEngine, RandomDepthInitializer)
from .events import EventObservation
from .gp import (ControlState, TrajectoryGP, WnoaPrior, extrapolate_state,
                 gp_prior_residual, interpolate_pair, interpolation_operators,
                 process_covariance, transition)
from .graph import (FactorGraph, GpPriorFactor, GraphValues, PointPriorFactor,
                    PoseAnchorFactor, ReprojectionFactor, SparseBlockSystem,
                    TranslationNormFactor, VariableIndex, VariableLayout,
                    linearize_reprojection)
from .metrics import (PoseSeries, TrajectoryMetrics, absolute_trajectory_error,
                      path_length, relative_pose_error, trajectory_errors,
                      umeyama_alignment)
from .se3 import (SE3Pose, Twist, adjoint, compose, exp_map, inverse,
                  local_coordinates, log_map, retract)
from .sim import (EventFrame, SimResult, SimScenario, batch_events,
                  generate_events, make_trajectory)
from .solver import GnConfig, GnReport, gauss_newton, solve_normal_equations

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Triangulation", "project", "project_jacobians", "triangulate",
    "EngineConfig", "EventTrack", "GroundTruthInitializer", "IncrementalEngine",
    "RandomDepthInitializer", "EventObservation",
    "ControlState", "TrajectoryGP", "WnoaPrior", "extrapolate_state",
    "gp_prior_residual", "interpolate_pair", "interpolation_operators",
    "process_covariance", "transition",
    "FactorGraph", "GpPriorFactor", "GraphValues", "PointPriorFactor",
    "PoseAnchorFactor", "ReprojectionFactor", "SparseBlockSystem",
    "TranslationNormFactor", "VariableIndex", "VariableLayout",
    "linearize_reprojection",
    "PoseSeries", "TrajectoryMetrics", "absolute_trajectory_error", "path_length",
    "relative_pose_error", "trajectory_errors", "umeyama_alignment",
    "SE3Pose", "Twist", "adjoint", "compose", "exp_map", "inverse",
    "local_coordinates", "log_map", "retract",
    "EventFrame", "SimResult", "SimScenario", "batch_events", "generate_events",
    "make_trajectory",
    "GnConfig", "GnReport", "gauss_newton", "solve_normal_equations",
    "__version__",
]
