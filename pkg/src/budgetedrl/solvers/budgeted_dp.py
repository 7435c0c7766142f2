"""
Budgeted Bellman optimality operator (exact and sampled), Budgeted Value Iteration on finite BMDPs, and the
non-contraction witness.
"""
from typing import Optional, Tuple

import numpy

from .bmdp import (
    BiQFunction,
    BudgetedMdp,
    BudgetGrid,
    ConvergenceReport,
    GriddedQ,
    GridPolicy,
    Transition,
    VectorSignal,
    _backup_from_next_values,
    _policy_next_values,
    default_max_iters,
)
from .errors import DomainError
from .hull import hull_mixtures

import logging
logger = logging.getLogger(__name__)

__all__ = [
    "GriddedQ",
    "bellman_optimality_backup",
    "budgeted_value_iteration",
    "empirical_contraction_factor",
    "hull_policy_table",
    "noncontraction_pair",
    "noncontraction_witness",
    "rollout_grid_policy",
    "sampled_backup",
    "state_values",
]


def _hull_rows(table: numpy.ndarray, betas: numpy.ndarray):
    """π_hull for every budget of every state of a (S, A, G, 2) block."""
    n_s, n_a, n_g, _ = table.shape
    shape = (n_s, betas.size)
    out = [numpy.zeros(shape, dtype=numpy.int64) for _ in range(2)] + [numpy.zeros(shape), numpy.zeros(shape, dtype=bool)]
    for s in range(n_s):
        first, second, weight, infeasible = hull_mixtures(table[s, :, :, 1].ravel(), table[s, :, :, 0].ravel(), betas)
        out[0][s], out[1][s], out[2][s], out[3][s] = first, second, weight, infeasible
    return out


def hull_policy_table(q: GriddedQ, workers: int = 1) -> GridPolicy:
    """
    π_hull(·; q) tabulated on every (state, grid budget) cell.

    Cells are independent; with `workers` > 1 states are split into contiguous chunks solved by a joblib pool and
    gathered in order, so the result does not depend on the worker count.
    """
    betas = q.grid.values
    if workers <= 1 or q.n_states < 2:
        first, second, weight, infeasible = _hull_rows(q.table, betas)
    else:
        from joblib import Parallel, delayed

        chunks = [c for c in numpy.array_split(numpy.arange(q.n_states), workers) if c.size]
        parts = Parallel(n_jobs=workers)(delayed(_hull_rows)(q.table[c], betas) for c in chunks)
        first, second, weight, infeasible = (numpy.concatenate(p) for p in zip(*parts))
    n_g = len(q.grid)
    return GridPolicy(first // n_g, first % n_g, second // n_g, second % n_g, weight, infeasible, q.grid)


def state_values(q: GriddedQ, policy: GridPolicy) -> numpy.ndarray:
    """V(s, β) = E_{ā ~ π(s, β)} q(s, ā) as an (S, G, 2) array of (V_r, V_c)."""
    return _policy_next_values(q, policy)


def _optimality_backup(mdp: BudgetedMdp, q: GriddedQ, workers: int = 1) -> Tuple[GriddedQ, GridPolicy]:
    if q.table.shape[:2] != (mdp.n_states, mdp.n_actions):
        raise DomainError(f"Q table {q.table.shape[:2]} does not match the BMDP {(mdp.n_states, mdp.n_actions)}")
    policy = hull_policy_table(q, workers)
    return GriddedQ(_backup_from_next_values(mdp, _policy_next_values(q, policy)), q.grid), policy


def bellman_optimality_backup(mdp: BudgetedMdp, q: GriddedQ, workers: int = 1) -> GriddedQ:
    """
    One exact application of the Budgeted Bellman optimality operator.

    For every (s, a, β_a): R(s, a) + γ Σ_s′ P(s′|s, a) E_{ā′ ~ π_hull((s′, β_a); q)} q(s′, ā′), with zero continuation
    from terminal states. Infeasible budgets are counted, never fatal.
    """
    new, policy = _optimality_backup(mdp, q, workers)
    n_infeasible = int(policy.infeasible.sum())
    if n_infeasible:
        logger.debug(f"{n_infeasible} (state, budget) cells below their minimal achievable cost")
    return new


def budgeted_value_iteration(
    mdp: BudgetedMdp,
    grid: BudgetGrid,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
    workers: int = 1,
) -> Tuple[GriddedQ, ConvergenceReport]:
    """
    Budgeted Value Iteration from Q₀ = 0.

    The optimality operator is not a contraction, so convergence is not guaranteed: non-convergence is reported in
    the returned `ConvergenceReport` and logged, never raised.

    Args:
        mdp (BudgetedMdp): Finite BMDP.
        grid (BudgetGrid): Budget grid B̃.
        tol (float): Sup-norm residual tolerance.
        max_iters (int | None): Iteration cap, defaults to 10·⌈log(1/tol)/log(1/γ)⌉.
        workers (int): Worker processes for the hull computations.

    Returns:
        (Tuple[GriddedQ, ConvergenceReport]): The last iterate and the per-iteration residuals.

    Examples:
        >>> mdp = finite_chain_bmdp(3, seed=0)
        >>> q, report = budgeted_value_iteration(mdp, BudgetGrid.uniform(0, 0.1, 1))
        >>> report.converged
        True
    """
    max_iters = default_max_iters(mdp.gamma, tol) if max_iters is None else max_iters
    q = GriddedQ.zeros(mdp.n_states, mdp.n_actions, grid)
    report = ConvergenceReport()
    for k in range(1, max_iters + 1):
        new, policy = _optimality_backup(mdp, q, workers)
        delta = numpy.abs(new.table - q.table)
        report.append(k, delta[..., 0].max(initial=0.0), delta[..., 1].max(initial=0.0), int(policy.infeasible.sum()))
        q = new
        if k % 50 == 0:
            logger.debug(f"BVI iteration {k}: residual {report.residuals[-1]:.3e}")
        if mdp.gamma == 0 or delta.max(initial=0.0) < tol:
            report.converged = True
            break
    if report.converged:
        logger.info(f"BVI converged in {report.iterations} iterations (residual {report.residuals[-1]:.3e})")
    else:
        logger.warning(f"BVI stopped after {max_iters} iterations with residual {report.residuals[-1]:.3e} > {tol}")
    return q, report


def sampled_backup(q: BiQFunction, t: Transition, grid: BudgetGrid, gamma: float) -> VectorSignal:
    """
    Sampling operator on one transition: (r, c) + γ E_{ā′ ~ π_hull(s̄′; q)} q(s̄′, ā′), zero continuation if terminal.

    The next budget is snapped to the nearest grid value before the hull lookup.

    Args:
        q (BiQFunction): Current Q-function, queried on the whole grid at the next state.
        t (Transition): Observed transition.
        grid (BudgetGrid): Budget grid of the hull lookup.
        gamma (float): Discount of the continuation, the `gamma` of the BMDP or of `BftqConfig`. γ = 0 returns (r, c).

    Returns:
        (VectorSignal): The (reward, cost) target.
    """
    if t.terminal or gamma == 0:
        return VectorSignal(t.reward, t.cost)
    values = q.predict_grid(numpy.asarray([t.next_aug_state.state]), grid.values)[0]
    costs, rewards = values[..., 1].ravel(), values[..., 0].ravel()
    beta = numpy.asarray([grid.snap(t.next_aug_state.budget)])
    first, second, weight, _ = hull_mixtures(costs, rewards, beta)
    i, j, w = first[0], second[0], weight[0]
    cont_r = (1 - w) * rewards[i] + w * rewards[j]
    cont_c = (1 - w) * costs[i] + w * costs[j]
    return VectorSignal(float(t.reward + gamma * cont_r), float(t.cost + gamma * cont_c))


def noncontraction_pair(epsilon: float, mdp: BudgetedMdp) -> Tuple[GriddedQ, GriddedQ]:
    """
    The pair (Q¹, Q²) exhibiting non-contraction, on the grid {β_min, ε, β_max}.

    Q¹ is (0, 0) on action 0 and (1/γ, ε) elsewhere; Q² is (0, ε) on action 0 and (1/γ, 2ε) elsewhere, for every state
    and allocation.
    """
    if mdp.n_actions < 2:
        raise DomainError("the non-contraction witness needs at least two actions")
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if not 0 < mdp.gamma < 1:
        raise DomainError(f"the witness needs 0 < gamma < 1, got {mdp.gamma}")
    if not mdp.budget_min <= epsilon <= mdp.budget_max:
        raise DomainError(f"epsilon {epsilon} outside the budget space {mdp.budget_space}")
    grid = BudgetGrid(numpy.unique([mdp.budget_min, epsilon, mdp.budget_max]))
    q1 = numpy.empty((mdp.n_states, mdp.n_actions, len(grid), 2))
    q2 = numpy.empty_like(q1)
    q1[:, 0], q1[:, 1:] = (0.0, 0.0), (1.0 / mdp.gamma, epsilon)
    q2[:, 0], q2[:, 1:] = (0.0, epsilon), (1.0 / mdp.gamma, 2 * epsilon)
    return GriddedQ(q1, grid), GriddedQ(q2, grid)


def empirical_contraction_factor(mdp: BudgetedMdp, q1: GriddedQ, q2: GriddedQ) -> float:
    """‖TQ¹ - TQ²‖∞ / ‖Q¹ - Q²‖∞, with 0 for identical inputs. Observational only."""
    if q1.grid != q2.grid:
        raise DomainError("both Q-functions must share the same grid")
    distance = q1.sup_distance(q2)
    if distance == 0:
        return 0.0
    return bellman_optimality_backup(mdp, q1).sup_distance(bellman_optimality_backup(mdp, q2)) / distance


def noncontraction_witness(epsilon: float, mdp: BudgetedMdp) -> float:
    """
    Contraction ratio of one exact backup on the witness pair; at least 1/ε for any BMDP with two actions.

    Raises:
        DomainError: Fewer than two actions, ε ≤ 0, or γ outside (0, 1).
    """
    q1, q2 = noncontraction_pair(epsilon, mdp)
    ratio = empirical_contraction_factor(mdp, q1, q2)
    logger.info(f"non-contraction witness: epsilon={epsilon}, gamma={mdp.gamma}, ratio={ratio:.6g}")
    return ratio


def rollout_grid_policy(
    mdp: BudgetedMdp,
    policy: GridPolicy,
    state: int,
    budget_index: int,
    n_rollouts: int,
    rng: numpy.random.Generator,
    horizon: Optional[int] = None,
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    Monte-Carlo discounted returns of a tabular budgeted policy, vectorised over rollouts.

    Budgets are threaded as grid indices: the next budget is the allocation of the sampled action.

    Args:
        horizon (int | None): Truncation, defaults to the smallest H with γ^H < 1e-10 (1 when γ = 0).

    Returns:
        (Tuple[numpy.ndarray, numpy.ndarray]): Per-rollout G_r and G_c.
    """
    mdp.check_indices(state)
    if horizon is None:
        if mdp.gamma == 0:
            horizon = 1
        elif mdp.gamma < 1:
            horizon = int(numpy.ceil(numpy.log(1e-10) / numpy.log(mdp.gamma)))
        else:
            raise DomainError("an explicit horizon is required when gamma = 1")
    cumulative = numpy.cumsum(mdp.transition, axis=-1)
    states = numpy.full(n_rollouts, state, dtype=numpy.int64)
    budgets = numpy.full(n_rollouts, budget_index, dtype=numpy.int64)
    alive = numpy.ones(n_rollouts, dtype=bool)
    g_r, g_c = numpy.zeros(n_rollouts), numpy.zeros(n_rollouts)
    discount = 1.0
    for _ in range(horizon):
        take_second = rng.random(n_rollouts) < policy.weight[states, budgets]
        actions = numpy.where(take_second, policy.second_action[states, budgets], policy.first_action[states, budgets])
        allocs = numpy.where(take_second, policy.second_alloc[states, budgets], policy.first_alloc[states, budgets])
        g_r += alive * discount * mdp.reward[states, actions]
        g_c += alive * discount * mdp.cost[states, actions]
        u = rng.random(n_rollouts)[:, None]
        next_states = numpy.minimum((cumulative[states, actions] <= u).sum(axis=1), mdp.n_states - 1)
        alive &= ~mdp.terminal[next_states]
        states, budgets = next_states, allocs
        discount *= mdp.gamma
        if not alive.any():
            break
    return g_r, g_c
