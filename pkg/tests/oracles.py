"""Independent reference implementations the tests check the library against.

Everything here is deliberately written from the definitions (dense
kernels, finite differences, brute-force assembly) rather than reusing the
library's computation paths.
"""

import numpy as np

from ctsfm import se3


def integrated_matrix_exponential(twist, steps=1_000_000):
    """Euler product for the matrix ODE dT/ds = T [v]x, evaluated by squaring.

    With constant generator the 1e-6-step Euler chain is exactly
    (I + h V)^N, computed here by binary powering.
    """
    V = np.zeros((4, 4))
    V[:3, :3] = se3.skew(twist[3:])
    V[:3, 3] = twist[:3]
    h = 1.0 / steps
    return np.linalg.matrix_power(np.eye(4) + h * V, steps)


def transition_oracle(dt):
    phi = np.eye(12)
    phi[:6, 6:] = dt * np.eye(6)
    return phi


def q_oracle(dt, qc):
    return np.block([[dt**3 / 3.0 * qc, dt**2 / 2.0 * qc],
                     [dt**2 / 2.0 * qc, dt * qc]])


def dense_kernel_regression(t_start, gamma_start, obs_times, obs_states, query_t, qc):
    """GP posterior mean at query_t from the full kernel over all observations.

    The process starts at t_start with known state gamma_start; the kernel
    block for s <= t is K(s, t) = Q(s - t_start) Phi(t - s)^T.
    """

    def kernel(ti, tj):
        a, b = min(ti, tj), max(ti, tj)
        blk = q_oracle(a - t_start, qc) @ transition_oracle(b - a).T
        return blk if ti <= tj else blk.T

    n = len(obs_times)
    K = np.zeros((12 * n, 12 * n))
    for i in range(n):
        for j in range(n):
            K[12 * i:12 * i + 12, 12 * j:12 * j + 12] = kernel(obs_times[i], obs_times[j])
    kq = np.zeros((12, 12 * n))
    for j in range(n):
        kq[:, 12 * j:12 * j + 12] = kernel(query_t, obs_times[j])
    mean_obs = np.concatenate([transition_oracle(t - t_start) @ gamma_start
                               for t in obs_times])
    mean_q = transition_oracle(query_t - t_start) @ gamma_start
    dev = np.concatenate(obs_states) - mean_obs
    return mean_q + kq @ np.linalg.solve(K, dev)


def numeric_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian of a vector function of a flat vector."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        J[:, i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step)
    return J


def pose_tangent_jacobian(f, pose, step=1e-6):
    """Central differences of f under right perturbation of an SE3Pose."""
    f0 = np.asarray(f(pose))
    J = np.zeros((f0.size, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        fp = np.asarray(f(se3.retract(pose, e)))
        fm = np.asarray(f(se3.retract(pose, -e)))
        J[:, i] = (fp - fm) / (2.0 * step)
    return J


def rel_error(a, b, floor=1.0):
    scale = max(floor, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def random_pose(rng, trans_scale=1.0, rot_scale=0.5):
    v = np.concatenate([trans_scale * rng.normal(size=3),
                        rot_scale * rng.normal(size=3)])
    return se3.exp_map(v)
