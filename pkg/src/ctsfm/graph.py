"""Factor graph for continuous-time SfM: variables, factors, sparse assembly.

Variables are control states (12 dof: 6 pose tangent + 6 velocity) and
landmarks (3 dof).  Each factor contributes a residual r, an information
weight W and Jacobian blocks J per variable; the normal equations accumulate
A = sum J^T W J and b = -sum J^T W r, the prior-plus-measurement information
form that Gauss-Newton solves.

Per-event reprojection factors live in a columnar store so linearization,
cost evaluation and assembly run as vectorized passes over tens of
thousands of events.  ``linearize_reprojection`` is the scalar reference
implementation of the same math; the tests pin the vectorized path to it
and both to finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera, gp, se3
from .camera import CameraIntrinsics
from .errors import InvalidArgumentError
from .gp import WnoaPrior
from .se3 import SE3Pose

STATE_DIM = 12
LANDMARK_DIM = 3
DEFAULT_PIXEL_SIGMA = 0.5  # px; R_k = sigma^2 I unless a factor overrides it

_CHUNK = 8192  # factors per vectorized pass, caps transient memory


@dataclass(frozen=True, order=True)
class VariableIndex:
    kind: str      # "state" | "landmark"
    ordinal: int

    def __post_init__(self):
        if self.kind not in ("state", "landmark"):
            raise InvalidArgumentError(f"unknown variable kind {self.kind!r}")
        if self.ordinal < 0:
            raise InvalidArgumentError("ordinal must be non-negative")

    @property
    def dim(self) -> int:
        return STATE_DIM if self.kind == "state" else LANDMARK_DIM

    def __str__(self):
        return f"{self.kind} {self.ordinal}"


def state_var(i: int) -> VariableIndex:
    return VariableIndex("state", i)


def landmark_var(i: int) -> VariableIndex:
    return VariableIndex("landmark", i)


def ordered_pair(a: VariableIndex, b: VariableIndex):
    """Canonical block key: states before landmarks, then by ordinal."""
    ka = (a.kind == "landmark", a.ordinal)
    kb = (b.kind == "landmark", b.ordinal)
    return (a, b) if ka <= kb else (b, a)


class GraphValues:
    """Current estimates: state poses/velocities and landmark positions.

    Poses are camera-to-world, stored as stacked arrays for the vectorized
    factor paths.  Updates follow the manifold convention: poses retract on
    the right, velocities and landmarks add.
    """

    def __init__(self):
        self.rot = np.zeros((0, 3, 3))
        self.trans = np.zeros((0, 3))
        self.vel = np.zeros((0, 6))
        self.lm = np.zeros((0, 3))

    @property
    def n_states(self) -> int:
        return self.rot.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.lm.shape[0]

    def copy(self) -> "GraphValues":
        out = GraphValues.__new__(GraphValues)
        out.rot = self.rot.copy()
        out.trans = self.trans.copy()
        out.vel = self.vel.copy()
        out.lm = self.lm.copy()
        return out

    def add_state(self, pose: SE3Pose, velocity) -> int:
        self.rot = np.concatenate([self.rot, pose.rotation[None]])
        self.trans = np.concatenate([self.trans, pose.translation[None]])
        self.vel = np.concatenate([self.vel, np.asarray(velocity, float)[None]])
        return self.n_states - 1

    def add_landmark(self, position) -> int:
        self.lm = np.concatenate([self.lm, np.asarray(position, float)[None]])
        return self.n_landmarks - 1

    def pose(self, i: int) -> SE3Pose:
        # copies so callers can hold the pose across later in-place updates
        return SE3Pose._trusted(self.rot[i].copy(), self.trans[i].copy())

    def set_pose(self, i: int, pose: SE3Pose):
        self.rot[i] = pose.rotation
        self.trans[i] = pose.translation

    def control_state(self, i: int, timestamp: float) -> gp.ControlState:
        return gp.ControlState(timestamp=timestamp, pose=self.pose(i),
                               velocity=self.vel[i].copy())

    def apply_delta(self, layout: "VariableLayout", delta: np.ndarray):
        for var, off in layout.offsets.items():
            if var.kind == "state":
                i = var.ordinal
                R_d, t_d = se3.se3_exp_many(delta[off:off + 6][None])
                self.trans[i] = self.rot[i] @ t_d[0] + self.trans[i]
                self.rot[i] = self.rot[i] @ R_d[0]
                self.vel[i] += delta[off + 6:off + 12]
            else:
                self.lm[var.ordinal] += delta[off:off + 3]

    def transform(self, g: SE3Pose):
        """Apply a world-frame rigid transform to every pose and landmark."""
        self.rot = np.einsum("ij,njk->nik", g.rotation, self.rot)
        self.trans = self.trans @ g.rotation.T + g.translation
        if self.lm.size:
            self.lm = self.lm @ g.rotation.T + g.translation


@dataclass
class VariableLayout:
    """Ordered active variables with flat offsets (states first, then landmarks)."""

    variables: list[VariableIndex]
    offsets: dict[VariableIndex, int]
    total_dim: int

    @classmethod
    def build(cls, variables) -> "VariableLayout":
        ordered = sorted(variables, key=lambda v: (v.kind == "landmark", v.ordinal))
        offsets = {}
        off = 0
        for v in ordered:
            offsets[v] = off
            off += v.dim
        return cls(variables=ordered, offsets=offsets, total_dim=off)


@dataclass
class Linearization:
    residual: np.ndarray
    weight: np.ndarray                       # information matrix of the residual
    blocks: dict[VariableIndex, np.ndarray]  # d residual / d variable
    active: bool = True

    def cost(self) -> float:
        if not self.active:
            return 0.0
        return 0.5 * float(self.residual @ self.weight @ self.residual)


# ---------------------------------------------------------------------------
# factor types
# ---------------------------------------------------------------------------

@dataclass
class ReprojectionFactor:
    """One event projected through the GP-interpolated pose at its time.

    ``left_state`` and ``right_state`` are the bracketing knots; the event
    time satisfies s_l <= t < s_r (closed on the left because knots are
    created at event timestamps), except events at the final knot time,
    which use the last interval with t == s_r.
    """

    pixel: np.ndarray
    timestamp: float
    track_id: int
    landmark: VariableIndex
    left_state: VariableIndex
    right_state: VariableIndex
    pixel_info: np.ndarray   # 2x2 information (inverse pixel covariance)

    def __post_init__(self):
        if self.right_state.ordinal != self.left_state.ordinal + 1:
            raise InvalidArgumentError("bracketing states must be consecutive")

    def variables(self):
        return [self.left_state, self.right_state, self.landmark]


def linearize_reprojection(f: ReprojectionFactor, values: GraphValues,
                           state_times, intrinsics: CameraIntrinsics,
                           prior: WnoaPrior) -> Linearization:
    """Scalar reference linearization of an interpolated reprojection factor.

    Residual is z - h(interp(t), landmark).  A point at or behind the
    camera marks the factor inactive for this iteration (zero blocks)
    instead of raising.
    """
    li, ri = f.left_state.ordinal, f.right_state.ordinal
    s_l, s_r = state_times[li], state_times[ri]
    lam, psi = gp.interpolation_operators(s_l, f.timestamp, s_r, prior)
    T_l = values.pose(li)
    xi_lr = se3.local_coordinates(T_l, values.pose(ri)).vector
    gamma_l = np.concatenate([np.zeros(6), values.vel[li]])
    gamma_r = np.concatenate([xi_lr, values.vel[ri]])
    xi_tau = (lam @ gamma_l + psi @ gamma_r)[:6]
    T_tau = se3.retract(T_l, xi_tau)
    lm_pos = values.lm[f.landmark.ordinal]
    xc = se3.inverse(T_tau).apply(lm_pos)
    if xc[2] <= camera.DEPTH_MIN:
        return Linearization(residual=np.zeros(2), weight=f.pixel_info,
                             blocks={v: np.zeros((2, v.dim)) for v in f.variables()},
                             active=False)
    k = intrinsics
    pred = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
    hc = camera.pixel_jacobian_wrt_point(xc, k)
    hp = np.hstack([-hc, hc @ se3.skew(xc)])      # wrt right perturbation of T_tau
    jr_tau = se3.se3_right_jacobian(xi_tau)
    ad = se3.adjoint(se3.exp_map(-xi_tau))
    jl_inv = se3.se3_left_jacobian_inv(xi_lr)
    jr_inv = se3.se3_right_jacobian_inv(xi_lr)
    psi11, psi12 = psi[:6, :6], psi[:6, 6:]
    lam12 = lam[:6, 6:]
    d_pose_l = hp @ (ad - jr_tau @ psi11 @ jl_inv)
    d_vel_l = hp @ jr_tau @ lam12
    d_pose_r = hp @ jr_tau @ psi11 @ jr_inv
    d_vel_r = hp @ jr_tau @ psi12
    d_lm = hc @ T_tau.rotation.T
    # residual = z - h, so residual Jacobians are the negated pixel ones
    blocks = {
        f.left_state: -np.hstack([d_pose_l, d_vel_l]),
        f.right_state: -np.hstack([d_pose_r, d_vel_r]),
        f.landmark: -d_lm,
    }
    return Linearization(residual=f.pixel - pred, weight=f.pixel_info, blocks=blocks)


@dataclass
class GpPriorFactor:
    """WNOA motion prior between consecutive control states."""

    left_state: VariableIndex
    right_state: VariableIndex
    dt: float
    information: np.ndarray  # 12x12 = Q(dt)^-1

    def __post_init__(self):
        if self.right_state.ordinal != self.left_state.ordinal + 1:
            raise InvalidArgumentError("GP prior links consecutive states")
        if self.dt <= 0:
            raise InvalidArgumentError("GP prior needs dt > 0")

    def variables(self):
        return [self.left_state, self.right_state]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        i, j = self.left_state.ordinal, self.right_state.ordinal
        xi_ij = se3.local_coordinates(values.pose(i), values.pose(j)).vector
        residual = np.concatenate([xi_ij - self.dt * values.vel[i],
                                   values.vel[j] - values.vel[i]])
        J_i = np.zeros((12, 12))
        J_i[:6, :6] = -se3.se3_left_jacobian_inv(xi_ij)
        J_i[:6, 6:] = -self.dt * np.eye(6)
        J_i[6:, 6:] = -np.eye(6)
        J_j = np.zeros((12, 12))
        J_j[:6, :6] = se3.se3_right_jacobian_inv(xi_ij)
        J_j[6:, 6:] = np.eye(6)
        return Linearization(residual=residual, weight=self.information,
                             blocks={self.left_state: J_i, self.right_state: J_j})


@dataclass
class FrameReprojectionFactor:
    """Reprojection of a landmark at a single state's own timestamp."""

    pixel: np.ndarray
    state: VariableIndex
    landmark: VariableIndex
    pixel_info: np.ndarray
    intrinsics: CameraIntrinsics

    def variables(self):
        return [self.state, self.landmark]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        T = values.pose(self.state.ordinal)
        xc = se3.inverse(T).apply(values.lm[self.landmark.ordinal])
        if xc[2] <= camera.DEPTH_MIN:
            return Linearization(residual=np.zeros(2), weight=self.pixel_info,
                                 blocks={v: np.zeros((2, v.dim)) for v in self.variables()},
                                 active=False)
        k = self.intrinsics
        pred = np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
        hc = camera.pixel_jacobian_wrt_point(xc, k)
        J_state = np.zeros((2, 12))
        J_state[:, :3] = hc
        J_state[:, 3:6] = -(hc @ se3.skew(xc))
        return Linearization(residual=self.pixel - pred, weight=self.pixel_info,
                             blocks={self.state: J_state,
                                     self.landmark: -(hc @ T.rotation.T)})


@dataclass
class PoseAnchorFactor:
    """Gauge prior pinning one state's pose to a fixed mean."""

    state: VariableIndex
    mean: SE3Pose
    information: np.ndarray  # 6x6

    def variables(self):
        return [self.state]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        r = se3.local_coordinates(self.mean, values.pose(self.state.ordinal)).vector
        J = np.zeros((6, 12))
        J[:, :6] = se3.se3_right_jacobian_inv(r)
        return Linearization(residual=r, weight=self.information,
                             blocks={self.state: J})


@dataclass
class VelocityPriorFactor:
    """Pins a state's velocity (frame-based baseline uses zero-velocity states)."""

    state: VariableIndex
    mean: np.ndarray
    information: np.ndarray  # 6x6

    def variables(self):
        return [self.state]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        J = np.zeros((6, 12))
        J[:, 6:] = np.eye(6)
        return Linearization(residual=values.vel[self.state.ordinal] - self.mean,
                             weight=self.information, blocks={self.state: J})


@dataclass
class TranslationNormFactor:
    """Monocular scale gauge: pins ||translation - anchor|| of one state."""

    state: VariableIndex
    anchor: np.ndarray
    target: float
    information: np.ndarray  # 1x1

    def variables(self):
        return [self.state]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        d = values.trans[self.state.ordinal] - self.anchor
        n = float(np.linalg.norm(d))
        J = np.zeros((1, 12))
        if n > 1e-12:
            # translation moves as R @ drho to first order under right perturbation
            J[0, :3] = (d / n) @ values.rot[self.state.ordinal]
        return Linearization(residual=np.array([n - self.target]),
                             weight=self.information, blocks={self.state: J})


@dataclass
class PointPriorFactor:
    """Weak position prior on a landmark (bootstrap depth regularization)."""

    landmark: VariableIndex
    mean: np.ndarray
    information: np.ndarray  # 3x3

    def variables(self):
        return [self.landmark]

    def linearize(self, values: GraphValues, state_times) -> Linearization:
        return Linearization(residual=values.lm[self.landmark.ordinal] - self.mean,
                             weight=self.information,
                             blocks={self.landmark: np.eye(3)})


# ---------------------------------------------------------------------------
# sparse block system
# ---------------------------------------------------------------------------

class SparseBlockSystem:
    """Symmetric block-sparse normal equations A delta = b.

    Blocks are keyed by canonically ordered variable pairs; the pattern
    holds a block iff some factor couples the two variables.
    """

    def __init__(self):
        self.blocks: dict[tuple[VariableIndex, VariableIndex], np.ndarray] = {}
        self.rhs: dict[VariableIndex, np.ndarray] = {}

    def add_block(self, a: VariableIndex, b: VariableIndex, contrib: np.ndarray):
        key = ordered_pair(a, b)
        if key != (a, b):
            contrib = contrib.T
        cur = self.blocks.get(key)
        if cur is None:
            self.blocks[key] = np.array(contrib, dtype=float)
        else:
            cur += contrib

    def add_rhs(self, a: VariableIndex, contrib: np.ndarray):
        cur = self.rhs.get(a)
        if cur is None:
            self.rhs[a] = np.array(contrib, dtype=float)
        else:
            cur += contrib

    def add_linearization(self, lin: Linearization, sign: float = 1.0):
        if not lin.active:
            return
        vars_ = list(lin.blocks.keys())
        wr = lin.weight @ lin.residual
        for i, vi in enumerate(vars_):
            Ji = lin.blocks[vi]
            JiW = Ji.T @ lin.weight
            self.add_rhs(vi, -sign * (Ji.T @ wr))
            for vj in vars_[i:]:
                self.add_block(vi, vj, sign * (JiW @ lin.blocks[vj]))

    def block_pattern(self):
        """Unordered variable pairs with a stored off-diagonal block."""
        return {k for k in self.blocks if k[0] != k[1]}

    def to_dense(self, layout: VariableLayout):
        n = layout.total_dim
        A = np.zeros((n, n))
        b = np.zeros(n)
        for (vi, vj), blk in self.blocks.items():
            oi = layout.offsets.get(vi)
            oj = layout.offsets.get(vj)
            if oi is None or oj is None:
                continue
            A[oi:oi + vi.dim, oj:oj + vj.dim] += blk
            if vi != vj:
                A[oj:oj + vj.dim, oi:oi + vi.dim] += blk.T
        for v, r in self.rhs.items():
            o = layout.offsets.get(v)
            if o is not None:
                b[o:o + v.dim] += r
        return A, b


# ---------------------------------------------------------------------------
# columnar store for per-event reprojection factors
# ---------------------------------------------------------------------------

class _ReprojectionStore:
    """Struct-of-arrays for event reprojection factors plus cached linearizations."""

    def __init__(self):
        self.factors: list[ReprojectionFactor] = []
        self._dirty = True
        self.pixel = np.zeros((0, 2))
        self.time = np.zeros(0)
        self.left = np.zeros(0, dtype=int)
        self.lm = np.zeros(0, dtype=int)
        self.track = np.zeros(0, dtype=int)
        self.info = np.zeros((0, 2, 2))
        self.enabled = np.zeros(0, dtype=bool)     # track not demoted
        # cached linearization state
        self.lin_valid = np.zeros(0, dtype=bool)
        self.lin_active = np.zeros(0, dtype=bool)  # in front of camera at lin point
        self.lin_resid = np.zeros((0, 2))
        self.lin_jac = np.zeros((0, 2, 27))        # [pose_l vel_l pose_r vel_r lm]
        self.lin_move = np.zeros((0, 3))           # per-var movement snapshot

    def __len__(self):
        return len(self.factors)

    def append(self, f: ReprojectionFactor):
        self.factors.append(f)
        self._dirty = True

    def set_track_enabled(self, track_ids, flag: bool):
        self._compile()
        mask = np.isin(self.track, list(track_ids))
        self.enabled[mask] = flag
        return mask

    def _compile(self):
        if not self._dirty:
            return
        n_old = self.pixel.shape[0]
        n = len(self.factors)
        if n == n_old:
            self._dirty = False
            return
        new = self.factors[n_old:]
        self.pixel = np.concatenate([self.pixel, np.array([f.pixel for f in new], float).reshape(-1, 2)])
        self.time = np.concatenate([self.time, np.array([f.timestamp for f in new], float)])
        self.left = np.concatenate([self.left, np.array([f.left_state.ordinal for f in new], int)])
        self.lm = np.concatenate([self.lm, np.array([f.landmark.ordinal for f in new], int)])
        self.track = np.concatenate([self.track, np.array([f.track_id for f in new], int)])
        self.info = np.concatenate([self.info, np.array([f.pixel_info for f in new], float).reshape(-1, 2, 2)])
        self.enabled = np.concatenate([self.enabled, np.ones(len(new), dtype=bool)])
        self.lin_valid = np.concatenate([self.lin_valid, np.zeros(len(new), dtype=bool)])
        self.lin_active = np.concatenate([self.lin_active, np.zeros(len(new), dtype=bool)])
        self.lin_resid = np.concatenate([self.lin_resid, np.zeros((len(new), 2))])
        self.lin_jac = np.concatenate([self.lin_jac, np.zeros((len(new), 2, 27))])
        self.lin_move = np.concatenate([self.lin_move, np.full((len(new), 3), -np.inf)])
        self._dirty = False


class _IntervalCache:
    """Per-interval quantities shared by all events bracketed by the same knots."""

    def __init__(self):
        self.xi = np.zeros((0, 6))        # local coords of right knot wrt left
        self.q_inv = np.zeros((0, 12, 12))
        self.jl_inv = np.zeros((0, 6, 6))
        self.jr_inv = np.zeros((0, 6, 6))

    def refresh(self, values: GraphValues, state_times, prior: WnoaPrior):
        m = values.n_states
        if m < 2:
            return
        n_int = m - 1
        xi = np.empty((n_int, 6))
        q_inv = np.empty((n_int, 12, 12))
        jl_inv = np.empty((n_int, 6, 6))
        jr_inv = np.empty((n_int, 6, 6))
        eye12 = np.eye(12)
        for i in range(n_int):
            xi[i] = se3.local_coordinates(values.pose(i), values.pose(i + 1)).vector
            q = gp._q_matrix(state_times[i + 1] - state_times[i], prior.qc)
            chol = np.linalg.cholesky(q)
            half = np.linalg.solve(chol, eye12)
            q_inv[i] = half.T @ half
            jl_inv[i] = se3.se3_left_jacobian_inv(xi[i])
            jr_inv[i] = se3.se3_right_jacobian_inv(xi[i])
        self.xi, self.q_inv, self.jl_inv, self.jr_inv = xi, q_inv, jl_inv, jr_inv


def _interp_tangent(store: _ReprojectionStore, idx, values: GraphValues,
                    state_times, cache: _IntervalCache, qc, want_jac: bool):
    """Vectorized interpolation chain for the factors selected by ``idx``.

    Returns a dict of stacked intermediates; always includes the predicted
    camera-to-world pose at each event time.
    """
    left = store.left[idx]
    s_l = state_times[left]
    s_r = state_times[left + 1]
    tau = store.time[idx]
    d_tau = tau - s_l
    d_right = s_r - tau
    delta = s_r - s_l
    qct = np.asarray(qc)
    # top 6x12 rows of Q(tau - s_l) @ Phi(s_r - tau)^T (block closed form)
    A = (d_tau**3 / 3.0)[:, None, None] * qct
    B = (d_tau**2 / 2.0)[:, None, None] * qct
    q_top = np.concatenate([A + d_right[:, None, None] * B, B], axis=2)  # (n, 6, 12)
    psi_top = q_top @ cache.q_inv[left]                                  # (n, 6, 12)
    psi11 = psi_top[:, :, :6]
    psi12 = psi_top[:, :, 6:]
    # Lambda top rows: [I, d_tau I] - psi_top @ Phi(delta)
    lam12 = d_tau[:, None, None] * np.eye(6) - (delta[:, None, None] * psi11 + psi12)
    lam11 = np.eye(6) - psi11
    xi_lr = cache.xi[left]
    v_l = values.vel[left]
    v_r = values.vel[left + 1]
    xi_tau = (np.einsum("nij,nj->ni", lam12, v_l)
              + np.einsum("nij,nj->ni", psi11, xi_lr)
              + np.einsum("nij,nj->ni", psi12, v_r))
    R_e, t_e = se3.se3_exp_many(xi_tau)
    R_l = values.rot[left]
    t_l = values.trans[left]
    R_tau = R_l @ R_e
    t_tau = np.einsum("nij,nj->ni", R_l, t_e) + t_l
    out = {"xi_tau": xi_tau, "R_tau": R_tau, "t_tau": t_tau, "left": left}
    del lam11
    if want_jac:
        out.update(psi11=psi11, psi12=psi12, lam12=lam12,
                   jr_tau=se3.se3_right_jacobian_many(xi_tau),
                   ad_inv=se3.adjoint_many(np.swapaxes(R_e, 1, 2),
                                           -np.einsum("nji,nj->ni", R_e, t_e)))
    return out


# ---------------------------------------------------------------------------
# factor graph
# ---------------------------------------------------------------------------

class FactorGraph:
    """Container coupling control states, landmarks and factors.

    Maintains the incremental normal-equation system: per-factor cached
    linearizations are added to / subtracted from ``system`` as factors are
    created, relinearized or deactivated, so repeated solves only pay for
    what changed.
    """

    def __init__(self, intrinsics: CameraIntrinsics, prior: WnoaPrior | None = None):
        self.intrinsics = intrinsics
        self.prior = prior if prior is not None else WnoaPrior()
        self.state_times: list[float] = []
        self.reproj = _ReprojectionStore()
        self.simple_factors: list = []
        self._simple_cache: list[Linearization | None] = []
        self._simple_move: list[np.ndarray | None] = []
        self._simple_enabled: list[bool] = []
        self.system = SparseBlockSystem()
        self._interval_cache = _IntervalCache()
        self.state_move = np.zeros(0)
        self.lm_move = np.zeros(0)
        self.inactive_reproj = 0       # behind-camera factors at last linearization
        self.linearize_count = 0       # factor linearizations performed (instrumentation)
        self.frozen_before = 0         # fixed-lag: states below this leave the layout
        self._solves_since_rebuild = 0

    # -- construction ------------------------------------------------------

    def add_state(self, values: GraphValues, timestamp: float, pose: SE3Pose,
                  velocity) -> VariableIndex:
        if self.state_times and timestamp <= self.state_times[-1]:
            raise InvalidArgumentError("states must be added in strict time order")
        ordinal = values.add_state(pose, velocity)
        self.state_times.append(timestamp)
        self.state_move = np.concatenate([self.state_move, [0.0]])
        return state_var(ordinal)

    def add_landmark(self, values: GraphValues, position) -> VariableIndex:
        ordinal = values.add_landmark(position)
        self.lm_move = np.concatenate([self.lm_move, [0.0]])
        return landmark_var(ordinal)

    def add_reprojection(self, f: ReprojectionFactor):
        self.reproj.append(f)

    def add_factor(self, f) -> int:
        self.simple_factors.append(f)
        self._simple_cache.append(None)
        self._simple_move.append(None)
        self._simple_enabled.append(True)
        return len(self.simple_factors) - 1

    def disable_simple_factor(self, index: int):
        if not self._simple_enabled[index]:
            return
        self._simple_enabled[index] = False
        cache = self._simple_cache[index]
        if cache is not None:
            self.system.add_linearization(cache, sign=-1.0)
            self._simple_cache[index] = None

    def add_gp_prior(self, left: VariableIndex, right: VariableIndex) -> GpPriorFactor:
        dt = self.state_times[right.ordinal] - self.state_times[left.ordinal]
        f = GpPriorFactor(left_state=left, right_state=right, dt=dt,
                          information=gp.process_information(dt, self.prior))
        self.add_factor(f)
        return f

    @property
    def times(self):
        return np.asarray(self.state_times)

    def n_factors(self):
        return len(self.simple_factors) + len(self.reproj)

    # -- movement bookkeeping ----------------------------------------------

    def note_step(self, layout: VariableLayout, delta: np.ndarray):
        """Accumulate per-variable tangent movement after a solver step."""
        for var, off in layout.offsets.items():
            step = float(np.linalg.norm(delta[off:off + var.dim]))
            if var.kind == "state":
                self.state_move[var.ordinal] += step
            else:
                self.lm_move[var.ordinal] += step

    def _var_move(self, var: VariableIndex) -> float:
        if var.kind == "state":
            return float(self.state_move[var.ordinal])
        return float(self.lm_move[var.ordinal])

    # -- linearization -----------------------------------------------------

    def relinearize(self, values: GraphValues, threshold: float | None = None) -> int:
        """Refresh cached linearizations and the incremental system.

        ``threshold`` None relinearizes everything (batch mode); otherwise
        only factors whose variables accumulated more tangent movement than
        the threshold since their last linearization are refreshed.
        """
        store = self.reproj
        store._compile()
        self._interval_cache.refresh(values, self.times, self.prior)
        n = len(store)
        if n:
            if threshold is None:
                need = store.enabled.copy()
            else:
                mv = np.stack([self.state_move[store.left],
                               self.state_move[store.left + 1],
                               self.lm_move[store.lm]], axis=1)
                need = store.enabled & (~store.lin_valid
                                        | np.any(mv - store.lin_move > threshold, axis=1))
            changed = int(np.count_nonzero(need))
            if changed:
                self._relinearize_reproj(values, np.flatnonzero(need))
        else:
            changed = 0
        for i, f in enumerate(self.simple_factors):
            if not self._simple_enabled[i]:
                continue
            cache = self._simple_cache[i]
            if threshold is not None and cache is not None:
                moves = self._simple_move[i]
                cur = np.array([self._var_move(v) for v in f.variables()])
                if np.all(cur - moves <= threshold):
                    continue
            lin = f.linearize(values, self.state_times)
            if cache is not None:
                self.system.add_linearization(cache, sign=-1.0)
            self.system.add_linearization(lin)
            self._simple_cache[i] = lin
            self._simple_move[i] = np.array([self._var_move(v) for v in f.variables()])
            self.linearize_count += 1
            changed += 1
        self.inactive_reproj = int(np.count_nonzero(
            store.enabled & store.lin_valid & ~store.lin_active))
        return changed

    def _relinearize_reproj(self, values: GraphValues, idx: np.ndarray):
        """Vectorized relinearization of the selected reprojection factors."""
        store = self.reproj
        self.linearize_count += len(idx)
        for lo in range(0, len(idx), _CHUNK):
            sel = idx[lo:lo + _CHUNK]
            old_contrib = self._reproj_contrib(sel) if np.any(store.lin_valid[sel]) else None
            self._compute_lin(values, sel)
            new_contrib = self._reproj_contrib(sel)
            self._scatter_contrib(sel, new_contrib, old_contrib)

    def _compute_lin(self, values: GraphValues, sel: np.ndarray):
        """Fill cached residuals/Jacobians for the selected factors."""
        store = self.reproj
        out = _interp_tangent(store, sel, values, self.times, self._interval_cache,
                              self.prior.qc, want_jac=True)
        lm_pos = values.lm[store.lm[sel]]
        pix, xc, in_front = camera.project_many(out["R_tau"], out["t_tau"], lm_pos,
                                                self.intrinsics)
        k = self.intrinsics
        z = xc[:, 2]
        hc = np.zeros((len(sel), 2, 3))
        hc[:, 0, 0] = k.fx / z
        hc[:, 0, 2] = -k.fx * xc[:, 0] / z**2
        hc[:, 1, 1] = k.fy / z
        hc[:, 1, 2] = -k.fy * xc[:, 1] / z**2
        hp = np.concatenate([-hc, hc @ se3.skew_many(xc)], axis=2)  # (n, 2, 6)
        jr_tau = out["jr_tau"]
        left = out["left"]
        cache = self._interval_cache
        hp_jr = hp @ jr_tau
        hp_jr_psi11 = hp_jr @ out["psi11"]
        d_pose_l = hp @ out["ad_inv"] - hp_jr_psi11 @ cache.jl_inv[left]
        d_vel_l = hp_jr @ out["lam12"]
        d_pose_r = hp_jr_psi11 @ cache.jr_inv[left]
        d_vel_r = hp_jr @ out["psi12"]
        d_lm = hc @ np.swapaxes(out["R_tau"], 1, 2)
        jac = np.concatenate([d_pose_l, d_vel_l, d_pose_r, d_vel_r, d_lm], axis=2)
        store.lin_jac[sel] = -jac
        store.lin_resid[sel] = store.pixel[sel] - pix
        store.lin_active[sel] = in_front & store.enabled[sel]
        store.lin_valid[sel] = True
        mv = np.stack([self.state_move[store.left[sel]],
                       self.state_move[store.left[sel] + 1],
                       self.lm_move[store.lm[sel]]], axis=1)
        store.lin_move[sel] = mv

    def _reproj_contrib(self, sel: np.ndarray):
        """J^T W J and -J^T W r pieces for the selected factors, from caches."""
        store = self.reproj
        w = store.info[sel] * store.lin_active[sel][:, None, None]
        jac = store.lin_jac[sel]
        wj = w @ jac                                       # (n, 2, 27)
        jtwj = np.einsum("nij,nik->njk", jac, wj)          # (n, 27, 27)
        wr = np.einsum("nij,nj->ni", w, store.lin_resid[sel])
        b = -np.einsum("nij,ni->nj", jac, wr)              # (n, 27)
        return jtwj, b

    def _scatter_contrib(self, sel: np.ndarray, new, old):
        """Apply (new - old) factor contributions to the incremental system."""
        store = self.reproj
        jtwj, b = new
        if old is not None:
            jtwj = jtwj - old[0]
            b = b - old[1]
        left = store.left[sel]
        lm = store.lm[sel]
        self._scatter_state_state(left, left, jtwj[:, 0:12, 0:12])
        self._scatter_state_state(left, left + 1, jtwj[:, 0:12, 12:24])
        self._scatter_state_state(left + 1, left + 1, jtwj[:, 12:24, 12:24])
        self._scatter_state_lm(left, lm, jtwj[:, 0:12, 24:27])
        self._scatter_state_lm(left + 1, lm, jtwj[:, 12:24, 24:27])
        self._scatter_lm_lm(lm, jtwj[:, 24:27, 24:27])
        self._scatter_rhs(left, b[:, 0:12], "state")
        self._scatter_rhs(left + 1, b[:, 12:24], "state")
        self._scatter_rhs(lm, b[:, 24:27], "landmark")

    @staticmethod
    def _group_sum(idx: np.ndarray, src: np.ndarray):
        """Sum src rows by idx; returns (unique_idx, sums)."""
        uniq, inv = np.unique(idx, return_inverse=True)
        flat = src.reshape(len(idx), -1)
        p = flat.shape[1]
        pos = (inv[:, None] * p + np.arange(p)[None, :]).ravel()
        sums = np.bincount(pos, weights=flat.ravel(), minlength=len(uniq) * p)
        return uniq, sums.reshape((len(uniq),) + src.shape[1:])

    def _scatter_state_state(self, ia, ib, contrib):
        uniq, sums = self._group_sum(ia * (len(self.state_times) + 1) + ib, contrib)
        m = len(self.state_times) + 1
        for key, blk in zip(uniq, sums):
            self.system.add_block(state_var(int(key // m)), state_var(int(key % m)), blk)

    def _scatter_state_lm(self, ist, ilm, contrib):
        n_lm = len(self.lm_move) + 1
        uniq, sums = self._group_sum(ist * n_lm + ilm, contrib)
        for key, blk in zip(uniq, sums):
            self.system.add_block(state_var(int(key // n_lm)),
                                  landmark_var(int(key % n_lm)), blk)

    def _scatter_lm_lm(self, ilm, contrib):
        uniq, sums = self._group_sum(ilm, contrib)
        for key, blk in zip(uniq, sums):
            self.system.add_block(landmark_var(int(key)), landmark_var(int(key)), blk)

    def _scatter_rhs(self, idx, contrib, kind):
        uniq, sums = self._group_sum(idx, contrib)
        mk = state_var if kind == "state" else landmark_var
        for key, vec in zip(uniq, sums):
            self.system.add_rhs(mk(int(key)), vec)

    def rebuild_system(self):
        """Reassemble the system from caches (clears incremental float drift)."""
        self.system = SparseBlockSystem()
        for lin in self._simple_cache:
            if lin is not None:
                self.system.add_linearization(lin)
        store = self.reproj
        idx = np.flatnonzero(store.lin_valid)
        for lo in range(0, len(idx), _CHUNK):
            sel = idx[lo:lo + _CHUNK]
            self._scatter_contrib(sel, self._reproj_contrib(sel), None)
        self._solves_since_rebuild = 0

    def assemble(self, values: GraphValues) -> SparseBlockSystem:
        """Linearize every factor at ``values`` and build a fresh system."""
        self.relinearize(values, threshold=None)
        self.rebuild_system()
        return self.system

    # -- evaluation ----------------------------------------------------------

    def reproj_residuals(self, values: GraphValues):
        """Exact residuals of enabled reprojection factors at ``values``.

        Returns (index array, residual (n, 2), in_front (n,)).
        """
        store = self.reproj
        store._compile()
        self._interval_cache.refresh(values, self.times, self.prior)
        idx = np.flatnonzero(store.enabled)
        res = np.zeros((len(idx), 2))
        front = np.zeros(len(idx), dtype=bool)
        for lo in range(0, len(idx), _CHUNK):
            sel = idx[lo:lo + _CHUNK]
            out = _interp_tangent(store, sel, values, self.times,
                                  self._interval_cache, self.prior.qc, want_jac=False)
            pix, _, in_front = camera.project_many(out["R_tau"], out["t_tau"],
                                                   values.lm[store.lm[sel]],
                                                   self.intrinsics)
            res[lo:lo + len(sel)] = store.pixel[sel] - pix
            front[lo:lo + len(sel)] = in_front
        return idx, res, front

    def cost(self, values: GraphValues) -> float:
        """Exact MAP cost: half the information-weighted squared residuals."""
        total = 0.0
        for i, f in enumerate(self.simple_factors):
            if self._simple_enabled[i]:
                total += f.linearize(values, self.state_times).cost()
        idx, res, front = self.reproj_residuals(values)
        if len(idx):
            w = self.reproj.info[idx] * front[:, None, None]
            total += 0.5 * float(np.einsum("ni,nij,nj->", res, w, res))
        return total

    def track_errors(self, values: GraphValues):
        """Mean reprojection error per track over its in-front enabled events."""
        idx, res, front = self.reproj_residuals(values)
        if not len(idx):
            return {}
        tracks = self.reproj.track[idx]
        norms = np.linalg.norm(res, axis=1)
        out = {}
        for t in np.unique(tracks):
            m = (tracks == t) & front
            if np.any(m):
                out[int(t)] = float(np.mean(norms[m]))
        return out

    def mean_reprojection_error(self, values: GraphValues) -> float:
        idx, res, front = self.reproj_residuals(values)
        if not np.any(front):
            return float("nan")
        return float(np.mean(np.linalg.norm(res[front], axis=1)))

    # -- variable activity ---------------------------------------------------

    def active_variables(self) -> list[VariableIndex]:
        """Non-frozen states plus landmarks still coupled to the active window.

        A landmark stays in the solve ordering only while it has an enabled
        reprojection factor bracketed inside the active window; a lone weak
        prior never carries a landmark by itself, so demoted or frozen-out
        landmarks drop from the ordering (their variables are retained).
        """
        out = [state_var(i) for i in range(self.frozen_before, len(self.state_times))]
        store = self.reproj
        store._compile()
        if len(store):
            # behind-camera factors contribute nothing, so a landmark whose
            # events are all currently inactive leaves the ordering too
            live = (store.enabled & (store.lin_active | ~store.lin_valid)
                    & (store.left + 1 >= self.frozen_before))
            active_lm = np.unique(store.lm[live])
        else:
            active_lm = []
        out.extend(landmark_var(int(i)) for i in active_lm)
        return out

    def deactivate_tracks(self, track_ids) -> int:
        """Disable all factors of the given tracks; updates the system."""
        if not track_ids:
            return 0
        store = self.reproj
        store._compile()
        mask = np.isin(store.track, list(track_ids)) & store.enabled
        store.enabled[mask] = False
        idx = np.flatnonzero(mask & store.lin_valid & store.lin_active)
        for lo in range(0, len(idx), _CHUNK):
            sel = idx[lo:lo + _CHUNK]
            old = self._reproj_contrib(sel)
            store.lin_active[sel] = False
            new = self._reproj_contrib(sel)   # zeroed by lin_active
            self._scatter_contrib(sel, new, old)
        return int(np.count_nonzero(mask))

    # -- diagnostics ---------------------------------------------------------

    def dump(self, values: GraphValues) -> str:
        """Deterministic text dump: one line per variable and factor."""
        lines = ["# ctsfm factor graph dump v1"]
        for i, t in enumerate(self.state_times):
            p = values.trans[i]
            lines.append(f"state {i} t={t:.9f} pos=({p[0]:.6f},{p[1]:.6f},{p[2]:.6f})")
        active = {v.ordinal for v in self.active_variables() if v.kind == "landmark"}
        for i in range(values.n_landmarks):
            p = values.lm[i]
            flag = "active" if i in active else "inactive"
            lines.append(f"landmark {i} {flag} pos=({p[0]:.6f},{p[1]:.6f},{p[2]:.6f})")
        for i, f in enumerate(self.simple_factors):
            name = type(f).__name__
            vars_ = " ".join(str(v) for v in f.variables())
            flag = "on" if self._simple_enabled[i] else "off"
            lines.append(f"factor {name} [{vars_}] {flag}")
        store = self.reproj
        store._compile()
        for i in range(len(store)):
            flag = "on" if store.enabled[i] else "off"
            lines.append(
                f"factor Reprojection track={store.track[i]} "
                f"[state {store.left[i]} state {store.left[i] + 1} landmark {store.lm[i]}] "
                f"t={store.time[i]:.9f} z=({store.pixel[i, 0]:.4f},{store.pixel[i, 1]:.4f}) {flag}")
        return "\n".join(lines) + "\n"


def default_pixel_info(sigma: float = DEFAULT_PIXEL_SIGMA) -> np.ndarray:
    return np.eye(2) / sigma**2
