"""Block-sparse Cholesky solver and the Gauss-Newton loop.

The normal equations A dx = b are factored block-wise (A = L L^T) in a
fill-reducing order found by greedy minimum degree on the block adjacency
graph; forward/back substitution recovers dx.  A non-positive pivot raises
``RankDeficiencyError`` naming the variable whose block failed, which is
the symptom of missing gauge fixing or an unobserved landmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DivergenceError, RankDeficiencyError
from .graph import FactorGraph, GraphValues, SparseBlockSystem, VariableLayout

PIVOT_REL_TOL = 1e-14  # pivot^2 vs largest diagonal entry: below this is singular


def min_degree_order(variables, pattern):
    """Greedy minimum-degree elimination order over the block adjacency.

    ``pattern`` is a set of unordered variable pairs; ties break on the
    layout order so the result is deterministic.
    """
    rank = {v: i for i, v in enumerate(variables)}
    adj = {v: set() for v in variables}
    for a, b in pattern:
        if a in adj and b in adj and a != b:
            adj[a].add(b)
            adj[b].add(a)
    order = []
    remaining = set(variables)
    while remaining:
        v = min(remaining, key=lambda u: (len(adj[u]), rank[u]))
        order.append(v)
        remaining.discard(v)
        nbrs = adj.pop(v)
        for u in nbrs:
            adj[u].discard(v)
        nbrs = list(nbrs)
        for i, u in enumerate(nbrs):
            adj[u].update(nbrs[:i])
            adj[u].update(nbrs[i + 1:])
    return order


def solve_normal_equations(system: SparseBlockSystem, layout: VariableLayout) -> np.ndarray:
    """Solve A dx = b by block Cholesky with a fill-reducing ordering.

    Returns the flat update vector in ``layout`` offsets.
    """
    variables = layout.variables
    if not variables:
        return np.zeros(0)
    order = min_degree_order(variables, system.block_pattern())
    pos = {v: i for i, v in enumerate(order)}
    n = len(order)

    diag: dict[int, np.ndarray] = {}
    cols: list[dict[int, np.ndarray]] = [dict() for _ in range(n)]
    max_diag = 0.0
    for (a, b), blk in system.blocks.items():
        ia = pos.get(a)
        ib = pos.get(b)
        if ia is None or ib is None:
            continue
        if ia == ib:
            diag[ia] = blk.copy()
            max_diag = max(max_diag, float(np.max(np.abs(np.diag(blk)))))
        elif ia > ib:
            cols[ib][ia] = blk.copy()
        else:
            cols[ia][ib] = blk.T.copy()
    for i, v in enumerate(order):
        if i not in diag:
            diag[i] = np.zeros((v.dim, v.dim))

    pivot_floor = math.sqrt(max(max_diag, 1e-300)) * math.sqrt(PIVOT_REL_TOL)
    L_diag: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    L_cols: list[dict[int, np.ndarray]] = [dict() for _ in range(n)]
    for j in range(n):
        D = diag[j]
        try:
            Ljj = np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(order[j]) from None
        if float(np.min(np.diag(Ljj))) < pivot_floor:
            raise RankDeficiencyError(order[j])
        L_diag[j] = Ljj
        col = cols[j]
        if not col:
            continue
        rows = sorted(col)
        lcol = L_cols[j]
        for i in rows:
            lcol[i] = scipy.linalg.solve_triangular(
                Ljj, col[i].T, lower=True, check_finite=False).T
        for a_i, ia in enumerate(rows):
            La = lcol[ia]
            diag[ia] = diag[ia] - La @ La.T
            for ib in rows[:a_i]:
                upd = La @ lcol[ib].T
                tgt = cols[ib]
                cur = tgt.get(ia)
                if cur is None:
                    tgt[ia] = -upd
                else:
                    cur -= upd

    # gather rhs in elimination order
    b = [np.zeros(v.dim) for v in order]
    for v, r in system.rhs.items():
        i = pos.get(v)
        if i is not None:
            b[i] = r.copy()
    # forward: L y = b
    for j in range(n):
        y = scipy.linalg.solve_triangular(L_diag[j], b[j], lower=True, check_finite=False)
        b[j] = y
        for i, Lij in L_cols[j].items():
            b[i] -= Lij @ y
    # backward: L^T x = y
    x = [None] * n  # type: ignore[list-item]
    for j in range(n - 1, -1, -1):
        acc = b[j]
        for i, Lij in L_cols[j].items():
            acc = acc - Lij.T @ x[i]
        x[j] = scipy.linalg.solve_triangular(L_diag[j].T, acc, lower=False,
                                             check_finite=False)

    delta = np.zeros(layout.total_dim)
    for j, v in enumerate(order):
        off = layout.offsets[v]
        delta[off:off + v.dim] = x[j]
    return delta


@dataclass
class GnConfig:
    max_iters: int = 50
    rel_tol: float = 1e-8      # stop when relative cost decrease drops below
    abs_tol: float = 1e-10     # stop when ||dx||_inf drops below
    max_backtracks: int = 8    # step halvings before an iteration counts as failed
    divergence_limit: int = 3  # consecutive failed iterations before aborting


@dataclass
class GnReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    relinearized: int = 0
    inactive_factors: int = 0


def gauss_newton(fg: FactorGraph, values: GraphValues, config: GnConfig | None = None,
                 relin_threshold: float | None = None) -> tuple[GraphValues, GnReport]:
    """Iterate linearize/solve/retract until the MAP cost stalls.

    ``relin_threshold`` None relinearizes every factor each iteration
    (batch); a float enables warm-start selective relinearization, reusing
    cached factor linearizations whose variables have not moved more than
    the threshold in accumulated tangent norm.

    Poses update by retraction, velocities and landmarks by addition.  A
    step that increases the cost is halved up to ``max_backtracks`` times;
    ``divergence_limit`` consecutive failed iterations raise
    ``DivergenceError`` carrying the best values seen.
    """
    config = config or GnConfig()
    values = values.copy()
    cost = fg.cost(values)
    report = GnReport(initial_cost=cost, final_cost=cost, cost_trace=[cost])
    best_cost, best_values = cost, values.copy()
    consecutive_failures = 0

    for _ in range(config.max_iters):
        report.relinearized += fg.relinearize(values, threshold=relin_threshold)
        layout = VariableLayout.build(fg.active_variables())
        delta = solve_normal_equations(fg.system, layout)
        if not np.all(np.isfinite(delta)):
            raise DivergenceError(best_values, report, "non-finite Gauss-Newton step")
        if float(np.max(np.abs(delta), initial=0.0)) < config.abs_tol:
            report.converged = True
            report.reason = "step below abs_tol"
            break
        alpha = 1.0
        accepted = None
        for _bt in range(config.max_backtracks + 1):
            candidate = values.copy()
            candidate.apply_delta(layout, alpha * delta)
            c_new = fg.cost(candidate)
            if np.isfinite(c_new) and c_new <= cost:
                accepted = (candidate, c_new, alpha)
                break
            alpha *= 0.5
        report.iterations += 1
        if accepted is None:
            consecutive_failures += 1
            if consecutive_failures >= config.divergence_limit:
                report.final_cost = best_cost
                report.reason = "diverged"
                raise DivergenceError(best_values, report)
            continue
        consecutive_failures = 0
        candidate, c_new, alpha = accepted
        fg.note_step(layout, alpha * delta)
        values = candidate
        rel_decrease = (cost - c_new) / max(cost, 1e-300)
        cost = c_new
        report.cost_trace.append(cost)
        if cost < best_cost:
            best_cost, best_values = cost, values.copy()
        if rel_decrease < config.rel_tol:
            report.converged = True
            report.reason = "relative decrease below rel_tol"
            break
    else:
        report.reason = "max iterations"

    report.final_cost = cost
    report.inactive_factors = fg.inactive_reproj
    fg._solves_since_rebuild += 1
    return values, report
