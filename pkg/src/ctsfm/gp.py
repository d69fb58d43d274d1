"""White-noise-on-acceleration GP prior over SE(3) trajectories.

A trajectory is a time-ordered set of control states (pose + body-frame
velocity).  The prior implies constant-velocity mean motion between knots,
a block-tridiagonal inverse kernel, and O(1) interpolation from the two
bracketing knots only.

Pose convention: control-state poses are camera-to-world; the body twist v
advances a pose by ``retract(pose, dt * v)`` along the prior mean.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import se3
from .errors import DegenerateIntervalError, InvalidArgumentError, OutOfRangeError
from .se3 import SE3Pose

DEGENERATE_INTERVAL = 1e-12


class WnoaPrior:
    """Power-spectral density of the white acceleration noise.

    Accepts a scalar, a length-6 diagonal, or a full 6x6 SPD matrix; stores
    the diagonal representation when one suffices.
    """

    def __init__(self, qc=1.0):
        qc = np.asarray(qc, dtype=float)
        if qc.ndim == 0:
            if qc <= 0:
                raise InvalidArgumentError("qc must be positive")
            self.qc_diag = np.full(6, float(qc))
            self.qc = np.diag(self.qc_diag)
        elif qc.shape == (6,):
            if np.any(qc <= 0):
                raise InvalidArgumentError("qc diagonal must be positive")
            self.qc_diag = qc.copy()
            self.qc = np.diag(qc)
        elif qc.shape == (6, 6):
            if np.max(np.abs(qc - qc.T)) > 1e-12:
                raise InvalidArgumentError("qc must be symmetric")
            try:
                np.linalg.cholesky(qc)
            except np.linalg.LinAlgError:
                raise InvalidArgumentError("qc must be positive definite") from None
            off = qc - np.diag(np.diag(qc))
            self.qc_diag = np.diag(qc).copy() if np.max(np.abs(off)) == 0.0 else None
            self.qc = qc.copy()
        else:
            raise InvalidArgumentError(f"qc must be scalar, (6,) or (6, 6), got {qc.shape}")

    def __repr__(self):
        if self.qc_diag is not None:
            return f"WnoaPrior(diag={self.qc_diag})"
        return "WnoaPrior(full 6x6)"


@dataclass
class ControlState:
    """GP knot: pose (camera-to-world) and body-frame velocity at a timestamp."""

    timestamp: float
    pose: SE3Pose
    velocity: np.ndarray  # 6-vector, (translational; rotational)

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise InvalidArgumentError("control state timestamp must be finite")
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.velocity.shape != (6,) or not np.isfinite(self.velocity).all():
            raise InvalidArgumentError("velocity must be a finite 6-vector")


def transition(dt: float) -> np.ndarray:
    """12x12 state transition over dt: identity blocks with dt coupling."""
    if dt < 0:
        raise InvalidArgumentError(f"dt must be non-negative, got {dt}")
    phi = np.eye(12)
    phi[:6, 6:] = dt * np.eye(6)
    return phi


def _q_matrix(dt: float, qc: np.ndarray) -> np.ndarray:
    q = np.empty((12, 12))
    q[:6, :6] = (dt**3 / 3.0) * qc
    q[:6, 6:] = (dt**2 / 2.0) * qc
    q[6:, :6] = q[:6, 6:]
    q[6:, 6:] = dt * qc
    return q


def process_covariance(dt: float, prior: WnoaPrior) -> np.ndarray:
    """12x12 accumulated process noise over dt > 0."""
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    return _q_matrix(dt, prior.qc)


def process_information(dt: float, prior: WnoaPrior) -> np.ndarray:
    """Q(dt)^-1 via Cholesky of the block closed form."""
    q = process_covariance(dt, prior)
    cf = scipy.linalg.cho_factor(q)
    return scipy.linalg.cho_solve(cf, np.eye(12))


def interpolation_operators(s_l: float, tau: float, s_r: float,
                            prior: WnoaPrior) -> tuple[np.ndarray, np.ndarray]:
    """Two-knot interpolation operators (Lambda, Psi) at tau in [s_l, s_r]."""
    if s_r - s_l < DEGENERATE_INTERVAL:
        raise DegenerateIntervalError(f"interval [{s_l}, {s_r}] too short")
    if not (s_l <= tau <= s_r):
        raise InvalidArgumentError(f"tau={tau} outside [{s_l}, {s_r}]")
    q_full = _q_matrix(s_r - s_l, prior.qc)
    cf = scipy.linalg.cho_factor(q_full)
    psi = scipy.linalg.cho_solve(cf, transition(s_r - tau) @ _q_matrix(tau - s_l, prior.qc).T).T
    lam = transition(tau - s_l) - psi @ transition(s_r - s_l)
    return lam, psi


def interpolate_pair(x_l: ControlState, x_r: ControlState, tau: float,
                     prior: WnoaPrior) -> ControlState:
    """Posterior-mean state at tau from its two bracketing knots.

    Works in the tangent space at the left knot: the right knot enters as
    its local coordinates, the result is retracted back onto SE(3).
    """
    lam, psi = interpolation_operators(x_l.timestamp, tau, x_r.timestamp, prior)
    xi_lr = se3.local_coordinates(x_l.pose, x_r.pose).vector
    gamma_l = np.concatenate([np.zeros(6), x_l.velocity])
    gamma_r = np.concatenate([xi_lr, x_r.velocity])
    u = lam @ gamma_l + psi @ gamma_r
    return ControlState(timestamp=tau,
                        pose=se3.retract(x_l.pose, u[:6]),
                        velocity=u[6:])


def extrapolate_state(last: ControlState, tau: float) -> ControlState:
    """Constant-velocity prediction past the last knot (WNOA process mean)."""
    if tau < last.timestamp:
        raise InvalidArgumentError(
            f"extrapolation time {tau} precedes last knot {last.timestamp}")
    if tau == last.timestamp:
        return last
    dt = tau - last.timestamp
    return ControlState(timestamp=tau,
                        pose=se3.retract(last.pose, dt * last.velocity),
                        velocity=last.velocity.copy())


def gp_prior_residual(x_i: ControlState, x_j: ControlState,
                      prior: WnoaPrior) -> tuple[np.ndarray, np.ndarray]:
    """WNOA error between consecutive knots and its information matrix.

    Residual is expressed in the tangent space at ``x_i``:
    [xi_ij - dt*v_i ; v_j - v_i], weighted by Q(dt)^-1.
    """
    dt = x_j.timestamp - x_i.timestamp
    if dt <= 0:
        raise InvalidArgumentError("knots must be time-ordered with dt > 0")
    xi_ij = se3.local_coordinates(x_i.pose, x_j.pose).vector
    residual = np.concatenate([xi_ij - dt * x_i.velocity, x_j.velocity - x_i.velocity])
    return residual, process_information(dt, prior)


def gp_prior_jacobians(x_i: ControlState, x_j: ControlState) -> tuple[np.ndarray, np.ndarray]:
    """d(residual)/d(state) blocks for the WNOA error, 12x12 each.

    Per-state perturbation is (pose tangent; velocity), poses perturbed on
    the right: T <- T @ exp(d).
    """
    dt = x_j.timestamp - x_i.timestamp
    xi_ij = se3.local_coordinates(x_i.pose, x_j.pose).vector
    jl_inv = se3.se3_left_jacobian_inv(xi_ij)
    jr_inv = se3.se3_right_jacobian_inv(xi_ij)
    J_i = np.zeros((12, 12))
    J_i[:6, :6] = -jl_inv
    J_i[:6, 6:] = -dt * np.eye(6)
    J_i[6:, 6:] = -np.eye(6)
    J_j = np.zeros((12, 12))
    J_j[:6, :6] = jr_inv
    J_j[6:, 6:] = np.eye(6)
    return J_i, J_j


@dataclass
class TrajectoryGP:
    """Time-ordered control states plus the WNOA prior.

    Interpolation touches exactly the two bracketing knots; every knot read
    goes through an access counter so tests can assert the O(1) contract.
    """

    prior: WnoaPrior = field(default_factory=WnoaPrior)
    knots: list[ControlState] = field(default_factory=list)
    knot_reads: int = 0

    def __post_init__(self):
        ts = [k.timestamp for k in self.knots]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidArgumentError("knot timestamps must be strictly increasing")
        self._times = ts

    def __len__(self):
        return len(self.knots)

    @property
    def timestamps(self):
        return list(self._times)

    def append(self, knot: ControlState):
        if self._times and knot.timestamp <= self._times[-1]:
            raise InvalidArgumentError(
                f"knot at {knot.timestamp} not after last knot {self._times[-1]}")
        self.knots.append(knot)
        self._times.append(knot.timestamp)

    def _get_knot(self, i: int) -> ControlState:
        self.knot_reads += 1
        return self.knots[i]

    def bracket(self, tau: float) -> int:
        """Index i with knot[i].t <= tau <= knot[i+1].t (exact hits resolve left)."""
        if not self._times:
            raise OutOfRangeError("trajectory has no knots")
        if tau < self._times[0] or tau > self._times[-1]:
            raise OutOfRangeError(
                f"tau={tau} outside knot span [{self._times[0]}, {self._times[-1]}]"
                " (use extrapolate)")
        i = bisect.bisect_right(self._times, tau) - 1
        return min(i, len(self._times) - 2) if len(self._times) > 1 else 0

    def interpolate(self, tau: float) -> ControlState:
        """Posterior-mean state at tau within the knot span."""
        i = self.bracket(tau)
        if self._times[i] == tau:
            return self._get_knot(i)
        if self._times[i + 1] == tau:
            return self._get_knot(i + 1)
        return self.interpolate_in_interval(i, tau)

    def interpolate_in_interval(self, i: int, tau: float) -> ControlState:
        """Interpolate inside interval i with the bracket already located."""
        return interpolate_pair(self._get_knot(i), self._get_knot(i + 1), tau, self.prior)

    def extrapolate(self, tau: float) -> ControlState:
        """Constant-velocity prediction at tau past the last knot."""
        if not self.knots:
            raise OutOfRangeError("trajectory has no knots")
        if tau < self._times[-1]:
            raise InvalidArgumentError(
                f"tau={tau} precedes last knot {self._times[-1]}; use interpolate")
        return extrapolate_state(self._get_knot(len(self.knots) - 1), tau)


# ---------------------------------------------------------------------------
# batched operator kernels for factor linearization
# ---------------------------------------------------------------------------

def q_matrix_many(dt, qc):
    """(N,) intervals -> (N, 12, 12) process covariances."""
    dt = np.asarray(dt, dtype=float)
    out = np.empty(dt.shape + (12, 12))
    out[..., :6, :6] = (dt**3 / 3.0)[..., None, None] * qc
    out[..., :6, 6:] = (dt**2 / 2.0)[..., None, None] * qc
    out[..., 6:, :6] = out[..., :6, 6:]
    out[..., 6:, 6:] = dt[..., None, None] * qc
    return out


def transition_many(dt):
    """(N,) -> (N, 12, 12) transitions."""
    dt = np.asarray(dt, dtype=float)
    out = np.broadcast_to(np.eye(12), dt.shape + (12, 12)).copy()
    idx = np.arange(6)
    out[..., idx, idx + 6] = dt[..., None]
    return out


def interpolation_operators_many(s_l, tau, s_r, q_full_inv, qc):
    """Batched (Lambda, Psi) for taus sharing per-element intervals.

    ``q_full_inv`` is Q(s_r - s_l)^-1, shape (N, 12, 12) (typically gathered
    from a per-interval cache).
    """
    tau = np.asarray(tau, dtype=float)
    psi = q_matrix_many(tau - s_l, qc) @ transition_many(s_r - tau).transpose(0, 2, 1) @ q_full_inv
    lam = transition_many(tau - s_l) - psi @ transition_many(s_r - s_l)
    return lam, psi
