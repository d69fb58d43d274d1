"""Pinhole measurement model, its Jacobians, and two-view triangulation.

Projection poses are world-to-camera.  No lens distortion: inputs are
assumed rectified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import BehindCameraError, CheiralityError, InvalidArgumentError, LowParallaxError
from .se3 import SE3Pose

DEPTH_MIN = 1e-3       # meters; points closer than this do not project
MIN_BASELINE = 1e-6    # meters
MIN_RAY_ANGLE_DEG = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the sensor")

    def contains(self, pixel) -> bool:
        u, v = pixel
        return 0 <= u < self.width and 0 <= v < self.height

    def bearing(self, pixel) -> np.ndarray:
        """Unit ray in the camera frame through a pixel."""
        d = np.array([(pixel[0] - self.cx) / self.fx,
                      (pixel[1] - self.cy) / self.fy,
                      1.0])
        return d / np.linalg.norm(d)


def project(pose_w2c: SE3Pose, point: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of a world point, raising when it is behind the camera."""
    xc = pose_w2c.apply(point)
    if xc[2] <= DEPTH_MIN:
        raise BehindCameraError(f"camera-frame depth {xc[2]:.6f} <= {DEPTH_MIN}")
    return np.array([k.fx * xc[0] / xc[2] + k.cx,
                     k.fy * xc[1] / xc[2] + k.cy])


def pixel_jacobian_wrt_point(xc: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """2x3 derivative of the pinhole map w.r.t. the camera-frame point."""
    x, y, z = xc
    return np.array([[k.fx / z, 0.0, -k.fx * x / z**2],
                     [0.0, k.fy / z, -k.fy * y / z**2]])


def project_jacobians(pose_w2c: SE3Pose, point: np.ndarray,
                      k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(2x6, 2x3) pixel derivatives w.r.t. pose and landmark.

    The pose derivative is taken in the tangent space at the current pose,
    right perturbation: pose <- pose @ exp(d).
    """
    point = np.asarray(point, dtype=float)
    xc = pose_w2c.apply(point)
    if xc[2] <= DEPTH_MIN:
        raise BehindCameraError(f"camera-frame depth {xc[2]:.6f} <= {DEPTH_MIN}")
    jc = pixel_jacobian_wrt_point(xc, k)
    # (T exp(d)) p = T (p + rho - [p]x phi) to first order
    d_xc_d_pose = np.hstack([pose_w2c.rotation, -pose_w2c.rotation @ se3.skew(point)])
    return jc @ d_xc_d_pose, jc @ pose_w2c.rotation


@dataclass(frozen=True)
class Triangulation:
    point: np.ndarray       # world frame
    ray_angle_deg: float    # quality: angle between the two back-projected rays


def triangulate(pose_a: SE3Pose, pose_b: SE3Pose, z_a, z_b,
                k: CameraIntrinsics) -> Triangulation:
    """Midpoint of the common perpendicular of two back-projected rays.

    Poses are world-to-camera.  Raises for near-parallel rays, a vanishing
    baseline, or a midpoint behind either camera.
    """
    inv_a = se3.inverse(pose_a)
    inv_b = se3.inverse(pose_b)
    c_a, c_b = inv_a.translation, inv_b.translation
    if np.linalg.norm(c_b - c_a) <= MIN_BASELINE:
        raise LowParallaxError("baseline between views is (near) zero")
    d_a = inv_a.rotation @ k.bearing(z_a)
    d_b = inv_b.rotation @ k.bearing(z_b)
    cos_angle = np.clip(np.dot(d_a, d_b), -1.0, 1.0)
    angle_deg = np.degrees(np.arccos(cos_angle))
    if angle_deg < MIN_RAY_ANGLE_DEG:
        raise LowParallaxError(f"ray angle {angle_deg:.4f} deg below {MIN_RAY_ANGLE_DEG}")
    # closest points: minimize ||(c_a + s d_a) - (c_b + t d_b)||
    w = c_a - c_b
    a_dot_b = np.dot(d_a, d_b)
    denom = 1.0 - a_dot_b**2
    s = (a_dot_b * np.dot(d_b, w) - np.dot(d_a, w)) / denom
    t = (np.dot(d_b, w) - a_dot_b * np.dot(d_a, w)) / denom
    midpoint = 0.5 * ((c_a + s * d_a) + (c_b + t * d_b))
    for pose in (pose_a, pose_b):
        if pose.apply(midpoint)[2] <= DEPTH_MIN:
            raise CheiralityError("triangulated point behind a camera")
    return Triangulation(point=midpoint, ray_angle_deg=float(angle_deg))


# ---------------------------------------------------------------------------
# batched kernels (camera-to-world pose stacks)
# ---------------------------------------------------------------------------

def project_many(R_wc, t_wc, points, k: CameraIntrinsics):
    """Project world points through camera-to-world pose stacks.

    Returns (pixels (N, 2), xc (N, 3), in_front (N,) bool); pixels of points
    at or behind DEPTH_MIN are computed against a clamped depth and flagged.
    """
    xc = np.einsum("nji,nj->ni", R_wc, points - t_wc)
    in_front = xc[:, 2] > DEPTH_MIN
    z = np.where(in_front, xc[:, 2], 1.0)
    pix = np.stack([k.fx * xc[:, 0] / z + k.cx,
                    k.fy * xc[:, 1] / z + k.cy], axis=1)
    return pix, xc, in_front
