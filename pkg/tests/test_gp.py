import numpy as np
import pytest

from ctsfm import gp, se3
from ctsfm.errors import (DegenerateIntervalError, InvalidArgumentError,
                          OutOfRangeError)
from ctsfm.gp import ControlState, TrajectoryGP, WnoaPrior
from ctsfm.se3 import SE3Pose

from oracles import dense_kernel_regression, q_oracle, random_pose


def make_traj(knots, qc=1.0):
    return TrajectoryGP(prior=WnoaPrior(qc), knots=list(knots))


def constant_velocity_knots(times, v, start=None):
    start = start or SE3Pose.identity()
    t0 = times[0]
    return [ControlState(timestamp=t, pose=se3.retract(start, (t - t0) * v),
                         velocity=np.array(v, float)) for t in times]


# -- transition -----------------------------------------------------------

def test_transition_zero_dt_is_identity():
    np.testing.assert_array_equal(gp.transition(0.0), np.eye(12))


def test_transition_semigroup():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t0, t1, t2 = np.sort(rng.uniform(0, 5, size=3))
        lhs = gp.transition(t2 - t0)
        rhs = gp.transition(t2 - t1) @ gp.transition(t1 - t0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_transition_unit_dt_upper_right_block():
    phi = gp.transition(1.0)
    np.testing.assert_array_equal(phi[:6, 6:], np.eye(6))
    np.testing.assert_array_equal(phi[:6, :6], np.eye(6))
    np.testing.assert_array_equal(phi[6:, 6:], np.eye(6))


def test_transition_rejects_negative_dt():
    with pytest.raises(InvalidArgumentError):
        gp.transition(-0.1)


# -- process covariance ----------------------------------------------------

def test_process_covariance_unit_closed_form():
    q = gp.process_covariance(1.0, WnoaPrior(1.0))
    np.testing.assert_allclose(q[:6, :6], np.eye(6) / 3.0, atol=1e-15)
    np.testing.assert_allclose(q[:6, 6:], np.eye(6) / 2.0, atol=1e-15)
    np.testing.assert_allclose(q[6:, 6:], np.eye(6), atol=1e-15)
    np.testing.assert_allclose(q, q_oracle(1.0, np.eye(6)), atol=1e-15)


@pytest.mark.parametrize("dt", [1e-6, 1.0, 1e3])
def test_process_covariance_spd(dt):
    q = gp.process_covariance(dt, WnoaPrior(np.array([1.0, 2.0, 0.5, 1.5, 3.0, 0.7])))
    np.linalg.cholesky(q)  # raises if not SPD


def test_process_covariance_scales_linearly_with_qc():
    q1 = gp.process_covariance(0.7, WnoaPrior(1.0))
    q3 = gp.process_covariance(0.7, WnoaPrior(3.0))
    np.testing.assert_allclose(q3, 3.0 * q1, atol=1e-14)


def test_process_covariance_rejects_nonpositive_dt():
    with pytest.raises(InvalidArgumentError):
        gp.process_covariance(0.0, WnoaPrior(1.0))
    with pytest.raises(InvalidArgumentError):
        gp.process_covariance(-1.0, WnoaPrior(1.0))


def test_process_information_is_inverse():
    prior = WnoaPrior(np.array([1.0, 2.0, 0.5, 1.5, 3.0, 0.7]))
    q = gp.process_covariance(0.3, prior)
    qinv = gp.process_information(0.3, prior)
    np.testing.assert_allclose(q @ qinv, np.eye(12), atol=1e-9)


def test_wnoa_prior_validation():
    with pytest.raises(InvalidArgumentError):
        WnoaPrior(-1.0)
    with pytest.raises(InvalidArgumentError):
        WnoaPrior(np.zeros(6))
    full = np.diag([1, 2, 3, 4, 5, 6.0])
    full[0, 1] = full[1, 0] = 0.1
    assert WnoaPrior(full).qc_diag is None
    assert WnoaPrior(2.0).qc_diag is not None


# -- interpolation operators -------------------------------------------------

def test_operators_left_endpoint():
    lam, psi = gp.interpolation_operators(1.0, 1.0, 2.0, WnoaPrior(1.0))
    np.testing.assert_allclose(lam, np.eye(12), atol=1e-12)
    np.testing.assert_allclose(psi, np.zeros((12, 12)), atol=1e-12)


def test_operators_right_endpoint():
    lam, psi = gp.interpolation_operators(1.0, 2.0, 2.0, WnoaPrior(1.0))
    np.testing.assert_allclose(lam, np.zeros((12, 12)), atol=1e-12)
    np.testing.assert_allclose(psi, np.eye(12), atol=1e-12)


def test_operators_match_dense_kernel_oracle():
    rng = np.random.default_rng(42)
    qc = np.diag(rng.uniform(0.5, 2.0, size=6))
    prior = WnoaPrior(qc)
    s_l, s_r = 1.0, 2.0
    for tau in (1.5, 1.1, 1.93):
        lam, psi = gp.interpolation_operators(s_l, tau, s_r, prior)
        g_l = rng.normal(size=12)
        g_r = rng.normal(size=12)
        direct = lam @ g_l + psi @ g_r
        oracle = dense_kernel_regression(0.25, rng.normal(size=12),
                                         [s_l, s_r], [g_l, g_r], tau, qc)
        np.testing.assert_allclose(direct, oracle, atol=1e-10)


def test_operators_validation():
    prior = WnoaPrior(1.0)
    with pytest.raises(InvalidArgumentError):
        gp.interpolation_operators(1.0, 2.5, 2.0, prior)
    with pytest.raises(InvalidArgumentError):
        gp.interpolation_operators(1.0, 0.5, 2.0, prior)
    with pytest.raises(DegenerateIntervalError):
        gp.interpolation_operators(1.0, 1.0, 1.0 + 1e-13, prior)


# -- trajectory interpolation -------------------------------------------------

def test_interpolate_at_knot_times_is_bit_identical():
    rng = np.random.default_rng(3)
    knots = [ControlState(timestamp=float(t), pose=random_pose(rng),
                          velocity=rng.normal(size=6))
             for t in [0.0, 0.4, 1.1, 2.0, 2.05]]
    traj = make_traj(knots)
    for k in knots:
        out = traj.interpolate(k.timestamp)
        assert out is k  # the knot itself: exact by construction
        assert np.all(out.pose.rotation == k.pose.rotation)
        assert np.all(out.velocity == k.velocity)


def test_interpolate_stationary_trajectory():
    pose = random_pose(np.random.default_rng(5))
    knots = [ControlState(0.0, pose, np.zeros(6)),
             ControlState(1.0, pose, np.zeros(6))]
    traj = make_traj(knots)
    for tau in (0.1, 0.5, 0.99):
        out = traj.interpolate(tau)
        np.testing.assert_allclose(out.pose.matrix(), pose.matrix(), atol=1e-12)
        np.testing.assert_allclose(out.velocity, np.zeros(6), atol=1e-12)


def test_interpolate_constant_velocity_translation_is_linear():
    v = np.array([0.4, -0.2, 0.1, 0.0, 0.0, 0.0])
    traj = make_traj(constant_velocity_knots([0.0, 2.0], v))
    mid = traj.interpolate(1.0)
    np.testing.assert_allclose(mid.pose.translation, v[:3] * 1.0, atol=1e-12)
    np.testing.assert_allclose(mid.velocity, v, atol=1e-12)


def test_interpolate_constant_velocity_general_twist_on_geodesic():
    v = np.array([0.3, -0.1, 0.2, 0.15, -0.2, 0.1])
    traj = make_traj(constant_velocity_knots([0.0, 1.5], v))
    for tau in (0.25, 0.75, 1.2):
        out = traj.interpolate(tau)
        expected = se3.exp_map(tau * v)
        np.testing.assert_allclose(out.pose.matrix(), expected.matrix(), atol=1e-10)
        np.testing.assert_allclose(out.velocity, v, atol=1e-10)


def test_interpolate_out_of_range():
    traj = make_traj(constant_velocity_knots([0.0, 1.0], np.zeros(6)))
    with pytest.raises(OutOfRangeError):
        traj.interpolate(-0.1)
    with pytest.raises(OutOfRangeError):
        traj.interpolate(1.5)


def test_interpolate_touches_exactly_two_knots():
    rng = np.random.default_rng(9)
    knots = constant_velocity_knots(np.linspace(0, 10, 101),
                                    np.array([0.1, 0, 0, 0, 0.02, 0]))
    traj = make_traj(knots)
    before = traj.knot_reads
    traj.interpolate(3.217)
    assert traj.knot_reads - before == 2
    before = traj.knot_reads
    traj.interpolate(9.99)
    assert traj.knot_reads - before == 2


def test_dense_oracle_equivalence_five_knots():
    # tangent-space interpolation against full-kernel regression over all
    # 5 knots (Markov property makes the extra knots irrelevant)
    rng = np.random.default_rng(21)
    qc = np.diag(rng.uniform(0.5, 1.5, size=6))
    times = [0.0, 0.5, 1.2, 1.9, 3.0]
    base = random_pose(rng, rot_scale=0.05)
    knots = []
    pose = base
    vel = rng.normal(size=6) * 0.05
    for i, t in enumerate(times):
        if i:
            dt = times[i] - times[i - 1]
            pose = se3.retract(pose, dt * vel + rng.normal(size=6) * 0.02)
            vel = vel + rng.normal(size=6) * 0.02
        knots.append(ControlState(t, pose, vel.copy()))
    traj = make_traj(knots, qc=qc)
    tau = 1.55
    out = traj.interpolate(tau)

    left = knots[2]  # bracketing left knot for tau=1.55
    gamma = []
    for k in knots:
        xi = se3.local_coordinates(left.pose, k.pose).vector
        gamma.append(np.concatenate([xi, k.velocity]))
    oracle = dense_kernel_regression(times[0] - 1.0, np.zeros(12), times, gamma,
                                     tau, qc)
    xi_tau = se3.local_coordinates(left.pose, out.pose).vector
    np.testing.assert_allclose(xi_tau, oracle[:6], atol=1e-6)
    np.testing.assert_allclose(out.velocity, oracle[6:], atol=1e-6)


# -- extrapolation ------------------------------------------------------------

def test_extrapolate_at_last_knot_returns_it():
    knots = constant_velocity_knots([0.0, 1.0], np.array([0.1, 0, 0, 0, 0, 0]))
    traj = make_traj(knots)
    out = traj.extrapolate(1.0)
    assert out is knots[1]


def test_extrapolate_zero_velocity_keeps_pose():
    pose = random_pose(np.random.default_rng(31))
    traj = make_traj([ControlState(0.0, pose, np.zeros(6))])
    out = traj.extrapolate(5.0)
    np.testing.assert_allclose(out.pose.matrix(), pose.matrix(), atol=1e-15)


def test_extrapolate_unit_velocity_advances_translation():
    v = np.array([1.0, 0, 0, 0, 0, 0])
    traj = make_traj([ControlState(1.0, SE3Pose.identity(), v)])
    out = traj.extrapolate(3.0)
    np.testing.assert_allclose(out.pose.translation, [2.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.velocity, v, atol=1e-15)


def test_extrapolate_before_last_knot_rejected():
    traj = make_traj(constant_velocity_knots([0.0, 1.0], np.zeros(6)))
    with pytest.raises(InvalidArgumentError):
        traj.extrapolate(0.5)


def test_extrapolate_then_interpolate_continuous_at_junction():
    v = np.array([0.2, -0.1, 0.05, 0.1, 0.0, -0.05])
    knots = constant_velocity_knots([0.0, 1.0], v)
    traj = make_traj(knots)
    new = traj.extrapolate(1.5)
    traj.append(new)
    eps = 1e-7
    left = traj.interpolate(1.0 - eps)
    right = traj.interpolate(1.0 + eps)
    gap = se3.local_coordinates(left.pose, right.pose).vector
    assert np.max(np.abs(gap)) < 1e-6  # O(eps) continuity
    # and at finite offsets the junction agrees to interpolation tolerance
    at = traj.interpolate(1.0)
    np.testing.assert_allclose(at.pose.matrix(), knots[1].pose.matrix(), atol=1e-9)


# -- prior residual -----------------------------------------------------------

def test_gp_prior_residual_zero_on_prior_mean():
    v = np.array([0.3, -0.2, 0.1, 0.05, 0.1, -0.15])
    x0, x1 = constant_velocity_knots([0.0, 0.8], v)
    r, w = gp.gp_prior_residual(x0, x1, WnoaPrior(1.0))
    np.testing.assert_allclose(r, np.zeros(12), atol=1e-12)
    np.testing.assert_allclose(w, gp.process_information(0.8, WnoaPrior(1.0)), atol=1e-9)


def test_gp_prior_residual_zero_stationary():
    pose = random_pose(np.random.default_rng(41))
    x0 = ControlState(0.0, pose, np.zeros(6))
    x1 = ControlState(1.0, pose, np.zeros(6))
    r, _ = gp.gp_prior_residual(x0, x1, WnoaPrior(1.0))
    np.testing.assert_allclose(r, np.zeros(12), atol=1e-15)


def test_gp_prior_residual_rejects_reversed_knots():
    x0, x1 = constant_velocity_knots([0.0, 1.0], np.zeros(6))
    with pytest.raises(InvalidArgumentError):
        gp.gp_prior_residual(x1, x0, WnoaPrior(1.0))


def test_gp_prior_gradient_matches_finite_differences():
    # energy E = 0.5 r^T Q^-1 r; the analytic Jacobians must reproduce dE
    rng = np.random.default_rng(43)
    prior = WnoaPrior(np.array([1.0, 0.8, 1.2, 0.5, 1.5, 0.9]))
    v = rng.normal(size=6) * 0.3
    x0, x1 = constant_velocity_knots([0.0, 0.6], v)
    x1 = ControlState(0.6, se3.retract(x1.pose, rng.normal(size=6) * 0.05),
                      x1.velocity + rng.normal(size=6) * 0.05)

    def energy(eps):
        p0 = se3.retract(x0.pose, eps[:6])
        p1 = se3.retract(x1.pose, eps[12:18])
        a = ControlState(x0.timestamp, p0, x0.velocity + eps[6:12])
        b = ControlState(x1.timestamp, p1, x1.velocity + eps[18:24])
        r, w = gp.gp_prior_residual(a, b, prior)
        return 0.5 * r @ w @ r

    r, w = gp.gp_prior_residual(x0, x1, prior)
    J_i, J_j = gp.gp_prior_jacobians(x0, x1)
    grad_analytic = np.concatenate([J_i.T @ (w @ r), J_j.T @ (w @ r)])
    h = 1e-6
    grad_fd = np.zeros(24)
    for i in range(24):
        e = np.zeros(24)
        e[i] = h
        grad_fd[i] = (energy(e) - energy(-e)) / (2 * h)
    scale = max(1.0, np.max(np.abs(grad_fd)))
    assert np.max(np.abs(grad_analytic - grad_fd)) / scale < 1e-5


# -- structural ---------------------------------------------------------------

def test_trajectory_requires_increasing_timestamps():
    k0 = ControlState(0.0, SE3Pose.identity(), np.zeros(6))
    k1 = ControlState(0.0, SE3Pose.identity(), np.zeros(6))
    with pytest.raises(InvalidArgumentError):
        make_traj([k0, k1])
    traj = make_traj([k0])
    with pytest.raises(InvalidArgumentError):
        traj.append(k1)


def test_constant_time_queries_independent_of_knot_count():
    import time

    v = np.array([0.05, 0.0, 0.0, 0.0, 0.01, 0.0])

    def median_query_time(n_knots, n_queries=400):
        traj = make_traj(constant_velocity_knots(np.linspace(0, 10, n_knots), v))
        rng = np.random.default_rng(77)
        taus = rng.uniform(0.01, 9.99, size=n_queries)
        brackets = [traj.bracket(t) for t in taus]  # exclude the log(M) search
        samples = []
        for i, tau in zip(brackets, taus):
            t0 = time.perf_counter_ns()
            traj.interpolate_in_interval(i, tau)
            samples.append(time.perf_counter_ns() - t0)
        return float(np.median(samples))

    small = median_query_time(10)
    large = median_query_time(10_000)
    assert large < 2.0 * small, (small, large)
