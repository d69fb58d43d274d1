"""SE(3) poses and se(3) twists: exponential/log maps, retraction, Jacobians.

Conventions used throughout the codebase:
  * a twist is ordered (translational; rotational), i.e. (rho, phi)
  * retraction is the right increment  retract(T, d) = T @ exp(d)
  * local coordinates invert it        local_coordinates(T, S) = log(T^-1 S)

``*_many`` functions are vectorized over a leading batch axis and operate on
raw arrays; they exist for the hot paths in factor linearization and the
event simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchAmbiguityError, InvalidArgumentError

SMALL_ANGLE = 1e-8           # below this, second-order Taylor branches
PI_BRANCH_MARGIN = 1e-6      # log is refused within this margin of pi
ORTHO_DRIFT_TOL = 1e-9       # re-orthonormalize when ||R^T R - I||_inf exceeds this


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi):
    """Rodrigues rotation from a rotation vector."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3)
            + (np.sin(theta) / theta) * K
            + ((1.0 - np.cos(theta)) / theta**2) * (K @ K))


def so3_log(R):
    """Rotation vector of a rotation matrix (principal branch)."""
    axis_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    norm = np.linalg.norm(axis_raw)      # = 2 sin(theta)
    c = 0.5 * (np.trace(R) - 1.0)        # = cos(theta)
    theta = np.arctan2(0.5 * norm, c)    # well conditioned over the whole branch
    if np.pi - theta < PI_BRANCH_MARGIN:
        raise BranchAmbiguityError(
            f"rotation angle {theta:.9f} within {PI_BRANCH_MARGIN} of pi")
    if norm < 2.0 * SMALL_ANGLE:
        return 0.5 * axis_raw
    return (theta / norm) * axis_raw


def so3_left_jacobian(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3)
            + ((1.0 - np.cos(theta)) / theta**2) * K
            + ((theta - np.sin(theta)) / theta**3) * (K @ K))


def so3_left_jacobian_inv(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    cot_half = theta * np.cos(theta / 2.0) / (2.0 * np.sin(theta / 2.0))
    return np.eye(3) - 0.5 * K + ((1.0 - cot_half) / theta**2) * (K @ K)


@dataclass(frozen=True)
class Twist:
    """Element of se(3): translational part ``rho``, rotational part ``phi``."""

    rho: np.ndarray
    phi: np.ndarray

    @property
    def vector(self):
        """6-vector (rho, phi)."""
        return np.concatenate([self.rho, self.phi])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (6,):
            raise InvalidArgumentError(f"twist vector must have shape (6,), got {v.shape}")
        return cls(rho=v[:3].copy(), phi=v[3:].copy())


def _as_twist_vector(v):
    if isinstance(v, Twist):
        return v.vector
    v = np.asarray(v, dtype=float)
    if v.shape != (6,):
        raise InvalidArgumentError(f"expected a Twist or 6-vector, got shape {v.shape}")
    return v


class SE3Pose:
    """Rigid transform stored as a rotation matrix plus translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("SE3Pose needs a 3x3 rotation and 3-vector translation")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise InvalidArgumentError("SE3Pose entries must be finite")
        drift = np.max(np.abs(R.T @ R - np.eye(3)))
        if drift > ORTHO_DRIFT_TOL:
            if drift > 1e-4:
                raise InvalidArgumentError(f"rotation drifted too far from O(3): {drift:.3e}")
            R = _orthonormalize(R)
        if np.linalg.det(R) < 0:
            raise InvalidArgumentError("rotation must have determinant +1")
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def _trusted(cls, R, t):
        # internal fast path: caller guarantees R in SO(3)
        obj = object.__new__(cls)
        obj.rotation = R
        obj.translation = t
        return obj

    def matrix(self):
        """Homogeneous 4x4 matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, p):
        """Transform one 3D point (or an (N, 3) stack of points)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def __repr__(self):
        return f"SE3Pose(t={self.translation}, R=\n{self.rotation})"


def _orthonormalize(R):
    # polar factor: closest rotation in Frobenius norm
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def exp_map(v) -> SE3Pose:
    """SE(3) exponential of a twist."""
    v = _as_twist_vector(v)
    if not np.isfinite(v).all():
        raise InvalidArgumentError("twist components must be finite")
    rho, phi = v[:3], v[3:]
    R = so3_exp(phi)
    t = so3_left_jacobian(phi) @ rho
    return SE3Pose._trusted(R, t)


def log_map(p: SE3Pose) -> Twist:
    """Inverse of :func:`exp_map` on the principal branch (angle < pi)."""
    phi = so3_log(p.rotation)
    rho = so3_left_jacobian_inv(phi) @ p.translation
    return Twist(rho=rho, phi=phi)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Group product a ∘ b."""
    R = a.rotation @ b.rotation
    drift = np.max(np.abs(R.T @ R - np.eye(3)))
    if drift > ORTHO_DRIFT_TOL:
        R = _orthonormalize(R)
    t = a.rotation @ b.translation + a.translation
    return SE3Pose._trusted(R, t)


def inverse(p: SE3Pose) -> SE3Pose:
    RT = p.rotation.T.copy()
    return SE3Pose._trusted(RT, -(RT @ p.translation))


def retract(base: SE3Pose, delta) -> SE3Pose:
    """Move away from ``base`` along tangent coordinates ``delta``."""
    return compose(base, exp_map(delta))


def local_coordinates(base: SE3Pose, target: SE3Pose) -> Twist:
    """Tangent coordinates of ``target`` in the frame of ``base``."""
    return log_map(compose(inverse(base), target))


def adjoint(p: SE3Pose):
    """6x6 adjoint mapping twists across the pose."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.rotation
    A[:3, 3:] = skew(p.translation) @ p.rotation
    A[3:, 3:] = p.rotation
    return A


def _coupling_block(rho, phi):
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    rx = skew(rho)
    px = skew(phi)
    theta = np.linalg.norm(phi)
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = -1.0 / 24.0 + t2 / 720.0
        c3 = 0.5 * (c2 - 3.0 * (-1.0 / 120.0 + t2 / 5040.0))
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (1.0 - theta**2 / 2.0 - c) / theta**4
        c3 = 0.5 * (c2 - 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    return (0.5 * rx
            + c1 * (pxrx + rxpx + pxrxpx)
            - c2 * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
            - c3 * (pxrxpx @ px + px @ pxrxpx))


def se3_left_jacobian(v):
    """6x6 left Jacobian: exp(v + dv) ≈ exp(Jl(v) dv) exp(v)."""
    v = _as_twist_vector(v)
    rho, phi = v[:3], v[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[:3, 3:] = _coupling_block(rho, phi)
    out[3:, 3:] = J
    return out


def se3_right_jacobian(v):
    """6x6 right Jacobian: exp(v + dv) ≈ exp(v) exp(Jr(v) dv)."""
    return se3_left_jacobian(-_as_twist_vector(v))


def se3_left_jacobian_inv(v):
    v = _as_twist_vector(v)
    rho, phi = v[:3], v[3:]
    Jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[:3, 3:] = -Jinv @ _coupling_block(rho, phi) @ Jinv
    out[3:, 3:] = Jinv
    return out


def se3_right_jacobian_inv(v):
    return se3_left_jacobian_inv(-_as_twist_vector(v))


# ---------------------------------------------------------------------------
# batched raw-array kernels
# ---------------------------------------------------------------------------

def skew_many(v):
    """(N, 3) -> (N, 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _sinc_coeffs(theta):
    """Batched Rodrigues coefficients a = sin/theta, b = (1-cos)/theta^2."""
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def so3_exp_many(phi):
    """(N, 3) rotation vectors -> (N, 3, 3) rotation matrices."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _sinc_coeffs(theta)
    K = skew_many(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def _left_jac_coeffs(theta):
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    return b, c


def so3_left_jacobian_many(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    b, c = _left_jac_coeffs(theta)
    K = skew_many(phi)
    K2 = K @ K
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * K2


def se3_exp_many(v):
    """(N, 6) twists -> rotations (N, 3, 3), translations (N, 3)."""
    v = np.asarray(v, dtype=float)
    rho, phi = v[..., :3], v[..., 3:]
    R = so3_exp_many(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian_many(phi), rho)
    return R, t


def _coupling_block_many(rho, phi):
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - s) / safe**3)
    c2 = np.where(small, -1.0 / 24.0 + t2 / 720.0, (1.0 - safe**2 / 2.0 - c) / safe**4)
    c3_tail = np.where(small, -1.0 / 120.0 + t2 / 5040.0,
                       (safe - s - safe**3 / 6.0) / safe**5)
    c3 = 0.5 * (c2 - 3.0 * c3_tail)
    rx = skew_many(rho)
    px = skew_many(phi)
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    return (0.5 * rx
            + c1[..., None, None] * (pxrx + rxpx + pxrxpx)
            - c2[..., None, None] * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
            - c3[..., None, None] * (pxrxpx @ px + px @ pxrxpx))


def se3_left_jacobian_many(v):
    """(N, 6) -> (N, 6, 6)."""
    v = np.asarray(v, dtype=float)
    rho, phi = v[..., :3], v[..., 3:]
    J = so3_left_jacobian_many(phi)
    out = np.zeros(v.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., :3, 3:] = _coupling_block_many(rho, phi)
    out[..., 3:, 3:] = J
    return out


def se3_right_jacobian_many(v):
    return se3_left_jacobian_many(-np.asarray(v, dtype=float))


def adjoint_many(R, t):
    """(N, 3, 3), (N, 3) -> (N, 6, 6) adjoints."""
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = skew_many(t) @ R
    out[..., 3:, 3:] = R
    return out
