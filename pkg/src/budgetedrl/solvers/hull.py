"""
Greedy budgeted policy by convex hull: dominated-point pruning, top frontier of the hull in the (Q_c, Q_r) plane,
and the budget-interpolating mixture of the two frontier vertices flanking the budget.

The array functions (`frontier_indices`, `hull_mixture`) are the hot path used by value iteration and target
computation; `prune_dominated`, `top_frontier` and `pi_hull` are their object-level counterparts.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy

from .bmdp import AugmentedAction, AugmentedState, BiQFunction, BudgetGrid, MixturePolicy
from .errors import DomainError

import logging
logger = logging.getLogger(__name__)

COLLINEAR_RTOL = 1e-12
ORACLE_REWARD_TOL = 1e-9
LINPROG_TOL = 1e-7


@dataclass(frozen=True)
class QPoint:
    """A candidate value (Q_c, Q_r) and the augmented action that produced it."""

    q_cost: float
    q_reward: float
    origin: Optional[AugmentedAction] = None


@dataclass
class HullFrontier:
    """
    Top frontier of the convex hull of undominated points.

    Attributes:
        vertices (List[QPoint]): Frontier vertices by strictly increasing cost.
        on_frontier (List[QPoint]): Non-vertex points lying on a frontier edge (collinear points).
    """

    vertices: List[QPoint]
    on_frontier: List[QPoint] = field(default_factory=list)

    def check(self) -> None:
        """Assert strictly increasing costs, non-decreasing rewards and concavity."""
        costs = numpy.asarray([v.q_cost for v in self.vertices])
        rewards = numpy.asarray([v.q_reward for v in self.vertices])
        check_frontier(costs, rewards)


class HullMixture(NamedTuple):
    """Indices of the two mixed candidates, probability `weight` of the second, and the infeasibility flag."""

    first: int
    second: int
    weight: float
    infeasible: bool

    def expectation(self, costs: numpy.ndarray, rewards: numpy.ndarray):
        """Expected (reward, cost) of the mixture."""
        w = self.weight
        return (
            (1 - w) * rewards[self.first] + w * rewards[self.second],
            (1 - w) * costs[self.first] + w * costs[self.second],
        )


def _tolerance(costs: numpy.ndarray, rewards: numpy.ndarray) -> float:
    scale = max(numpy.ptp(costs), numpy.ptp(rewards))
    return COLLINEAR_RTOL * scale * scale


def check_frontier(costs: numpy.ndarray, rewards: numpy.ndarray) -> None:
    assert numpy.all(numpy.diff(costs) > 0), "frontier costs must be strictly increasing"
    assert numpy.all(numpy.diff(rewards) >= 0), "frontier rewards must be non-decreasing"
    if costs.size > 2:
        slopes = numpy.diff(rewards) / numpy.diff(costs)
        scale = max(1.0, numpy.abs(slopes).max())
        assert numpy.all(numpy.diff(slopes) <= 1e-9 * scale), "frontier must be concave"


def prune_mask(costs: numpy.ndarray, rewards: numpy.ndarray) -> numpy.ndarray:
    """Mask of the points kept by pruning: cost not above the cheapest argmax-reward point."""
    best = rewards == rewards.max()
    return costs <= costs[best].min()


def frontier_indices(costs: numpy.ndarray, rewards: numpy.ndarray) -> numpy.ndarray:
    """
    Indices of the top-frontier vertices, ordered by increasing cost.

    Andrew's monotone chain on the upper hull after sorting by (cost, -reward). On cost ties only the max-reward
    point is kept; points collinear with a frontier edge (within 1e-12 of the squared bounding-box scale) are not
    vertices.

    Args:
        costs (numpy.ndarray): (n,) Q_c values.
        rewards (numpy.ndarray): (n,) Q_r values.

    Returns:
        (numpy.ndarray): Vertex indices into the input arrays.
    """
    keep = numpy.flatnonzero(prune_mask(costs, rewards))
    idx = keep[numpy.lexsort((-rewards[keep], costs[keep]))]
    # a point no better than a cheaper one is under the frontier
    r = rewards[idx]
    best_before = numpy.maximum.accumulate(numpy.r_[-numpy.inf, r[:-1]])
    idx = idx[r > best_before]

    tol = _tolerance(costs[idx], rewards[idx])
    hull: List[int] = []
    for i in idx:
        ci, ri = costs[i], rewards[i]
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (costs[a] - costs[o]) * (ri - rewards[o]) - (rewards[a] - rewards[o]) * (ci - costs[o])
            if cross < -tol:
                break
            hull.pop()
        hull.append(int(i))
    vertices = numpy.asarray(hull, dtype=numpy.int64)
    if logger.isEnabledFor(logging.DEBUG):
        check_frontier(costs[vertices], rewards[vertices])
    return vertices


def hull_mixture(costs, rewards, beta: float) -> HullMixture:
    """
    π_hull on arrays of candidate values.

    Finds successive frontier vertices with q¹_c ≤ β < q²_c and mixes them with p = (β - q¹_c)/(q²_c - q¹_c). A budget
    at or above the last vertex's cost gives a Dirac on it (max reward, then min cost); a budget below the first
    vertex's cost gives a Dirac on the safest point with the infeasibility flag raised.

    Examples:
        >>> hull_mixture(numpy.array([0.0, 1.0]), numpy.array([0.0, 1.0]), 0.5)
        HullMixture(first=0, second=1, weight=0.5, infeasible=False)
    """
    first, second, weight, infeasible = hull_mixtures(costs, rewards, numpy.asarray([beta], dtype=numpy.float64))
    return HullMixture(int(first[0]), int(second[0]), float(weight[0]), bool(infeasible[0]))


def hull_mixtures(costs, rewards, betas: numpy.ndarray):
    """
    `hull_mixture` for many budgets over one candidate set: the frontier is built once.

    Returns:
        (tuple): Arrays (first, second, weight, infeasible), one entry per budget.
    """
    costs = numpy.asarray(costs, dtype=numpy.float64)
    rewards = numpy.asarray(rewards, dtype=numpy.float64)
    if costs.size == 0:
        raise DomainError("π_hull needs at least one candidate")
    betas = numpy.asarray(betas, dtype=numpy.float64)
    vertices = frontier_indices(costs, rewards)
    vc = costs[vertices]
    last = vertices.size - 1
    k = numpy.clip(numpy.searchsorted(vc, betas, side="right") - 1, 0, last)
    k_next = numpy.minimum(k + 1, last)
    interior = (betas >= vc[0]) & (betas < vc[-1])
    span = numpy.where(interior, vc[k_next] - vc[k], 1.0)
    weight = numpy.where(interior, (betas - vc[k]) / span, 0.0)
    first = numpy.where(interior, vertices[k], numpy.where(betas < vc[0], vertices[0], vertices[last]))
    second = numpy.where(interior, vertices[k_next], first)
    return first, second, weight, betas < vc[0]


def _as_arrays(points: Sequence[QPoint]):
    if not points:
        raise DomainError("empty candidate set")
    return (
        numpy.asarray([p.q_cost for p in points], dtype=numpy.float64),
        numpy.asarray([p.q_reward for p in points], dtype=numpy.float64),
    )


def prune_dominated(points: Sequence[QPoint]) -> List[QPoint]:
    """
    Remove Q⁺, the points costlier than the cheapest argmax-reward point.

    Examples:
        >>> pts = [QPoint(0, 0), QPoint(1, 1), QPoint(2, 1)]
        >>> [(p.q_cost, p.q_reward) for p in prune_dominated(pts)]
        [(0, 0), (1, 1)]
    """
    costs, rewards = _as_arrays(points)
    mask = prune_mask(costs, rewards)
    return [p for p, keep in zip(points, mask) if keep]


def top_frontier(points: Sequence[QPoint]) -> HullFrontier:
    """Upper-left chain of the convex hull of `points`, with collinear non-vertex points recorded as on-frontier."""
    costs, rewards = _as_arrays(points)
    vertices = frontier_indices(costs, rewards)
    vc, vr = costs[vertices], rewards[vertices]
    atol = COLLINEAR_RTOL * max(numpy.ptp(costs), numpy.ptp(rewards), 1.0)
    is_vertex = numpy.zeros(len(points), dtype=bool)
    is_vertex[vertices] = True
    inside = (costs >= vc[0]) & (costs <= vc[-1]) & ~is_vertex
    on_edge = inside & (numpy.abs(numpy.interp(costs, vc, vr) - rewards) <= atol)
    return HullFrontier([points[i] for i in vertices], [points[i] for i in numpy.flatnonzero(on_edge)])


def enumerate_actions(n_actions: int, grid: BudgetGrid) -> List[AugmentedAction]:
    """A × B̃, action-major: the flattening order of `BiQFunction.predict_grid`'s (A, G) axes."""
    return [AugmentedAction(a, float(beta)) for a in range(n_actions) for beta in grid.values]


def _candidate_values(aug_state: AugmentedState, q: BiQFunction, actions: Sequence[AugmentedAction]):
    if not actions:
        raise DomainError("no candidate actions")
    n = len(actions)
    states = numpy.repeat(numpy.asarray([aug_state.state]), n, axis=0)
    values = q.predict(
        states,
        numpy.asarray([a.budget_allocation for a in actions], dtype=numpy.float64),
        numpy.asarray([a.action for a in actions], dtype=numpy.int64),
    )
    return values[:, 1], values[:, 0]


def _to_policy(choice: HullMixture, actions: Sequence[AugmentedAction]) -> MixturePolicy:
    if choice.first == choice.second:
        return MixturePolicy.dirac(actions[choice.first], choice.infeasible)
    return MixturePolicy(actions[choice.first], actions[choice.second], choice.weight, choice.infeasible)


def pi_hull(aug_state: AugmentedState, q: BiQFunction, actions: Sequence[AugmentedAction]) -> MixturePolicy:
    """
    Greedy budgeted policy at one augmented state.

    Args:
        aug_state (AugmentedState): Current state and budget β.
        q (BiQFunction): Q-function evaluated at every candidate.
        actions (Sequence[AugmentedAction]): Candidate augmented actions, typically `enumerate_actions(A, grid)`.

    Returns:
        (MixturePolicy): Mixture whose expected cost is min(β, max frontier cost).
    """
    costs, rewards = _candidate_values(aug_state, q, actions)
    choice = hull_mixture(costs, rewards, aug_state.budget)
    if choice.infeasible:
        logger.debug(f"budget {aug_state.budget} below the minimal achievable cost {costs.min():.6g}")
    return _to_policy(choice, actions)


def greedy_lp_oracle(costs, rewards, beta: float) -> HullMixture:
    """
    Exact solution of the nested greedy program by enumeration of Diracs and two-point mixtures.

    Stage one maximises expected reward under expected cost ≤ β; stage two minimises expected cost among
    distributions whose reward is within 1e-9 of the optimum. Optimal distributions of a linear program with one
    inequality constraint over the simplex have at most two support points, so enumeration is exact.
    """
    costs = numpy.asarray(costs, dtype=numpy.float64)
    rewards = numpy.asarray(rewards, dtype=numpy.float64)
    if costs.size == 0:
        raise DomainError("empty candidate set")
    feasible = costs <= beta
    if not feasible.any():
        safest = int(numpy.lexsort((-rewards, costs))[0])
        return HullMixture(safest, safest, 0.0, True)

    # stage 1: best reward at cost ≤ β
    best_reward = rewards[feasible].max()
    lo, hi = numpy.flatnonzero(costs < beta), numpy.flatnonzero(costs > beta)
    if lo.size and hi.size:
        i, j = numpy.meshgrid(lo, hi, indexing="ij")
        p = (beta - costs[i]) / (costs[j] - costs[i])
        best_reward = max(best_reward, ((1 - p) * rewards[i] + p * rewards[j]).max())

    # stage 2: cheapest way to reach it
    candidates = []
    diracs = numpy.flatnonzero(feasible & (rewards >= best_reward - ORACLE_REWARD_TOL))
    for k in diracs:
        candidates.append((costs[k], 0, HullMixture(int(k), int(k), 0.0, False)))
    below, above = numpy.flatnonzero(rewards < best_reward), numpy.flatnonzero(rewards > best_reward)
    if below.size and above.size:
        i, j = numpy.meshgrid(below, above, indexing="ij")
        w = (best_reward - rewards[i]) / (rewards[j] - rewards[i])
        cost = (1 - w) * costs[i] + w * costs[j]
        ok = cost <= beta + 1e-12
        if ok.any():
            k = numpy.argmin(numpy.where(ok, cost, numpy.inf))
            a, b = numpy.unravel_index(k, cost.shape)
            candidates.append((cost[a, b], 1, HullMixture(int(i[a, b]), int(j[a, b]), float(w[a, b]), False)))
    return min(candidates, key=lambda c: (c[0], c[1]))[2]


def greedy_policy_lp_oracle(
    aug_state: AugmentedState, q: BiQFunction, actions: Sequence[AugmentedAction]
) -> MixturePolicy:
    """`greedy_lp_oracle` at one augmented state; a test oracle for `pi_hull` on small candidate sets."""
    assert len(actions) <= 100, f"the enumeration oracle is meant for small instances, got {len(actions)} candidates"
    costs, rewards = _candidate_values(aug_state, q, actions)
    return _to_policy(greedy_lp_oracle(costs, rewards, aug_state.budget), actions)


def greedy_policy_linprog(costs, rewards, beta: float):
    """
    Independent cross-check of the nested greedy program with `scipy.optimize.linprog`.

    Returns:
        (tuple): Expected reward, expected cost and infeasibility flag of the optimal distribution.
    """
    from scipy.optimize import linprog

    costs = numpy.asarray(costs, dtype=numpy.float64)
    rewards = numpy.asarray(rewards, dtype=numpy.float64)
    n = costs.size
    if costs.min() > beta:
        k = int(numpy.lexsort((-rewards, costs))[0])
        return float(rewards[k]), float(costs[k]), True
    simplex = dict(A_eq=numpy.ones((1, n)), b_eq=[1.0], bounds=[(0, None)] * n, method="highs")
    first = linprog(-rewards, A_ub=costs[None, :], b_ub=[beta], **simplex)
    if not first.success:
        raise DomainError(f"linear program failed: {first.message}")
    best_reward = -first.fun
    second = linprog(
        costs, A_ub=numpy.vstack([costs, -rewards]), b_ub=[beta, -(best_reward - LINPROG_TOL)], **simplex
    )
    if not second.success:
        raise DomainError(f"linear program failed: {second.message}")
    return float(rewards @ second.x), float(costs @ second.x), False


def frontier_to_csv(frontier: HullFrontier, path: Union[str, Path]) -> Path:
    """Dump a frontier as CSV (q_cost, q_reward, action, budget_allocation, vertex) for plotting."""
    import pandas

    from budgetedrl.utils.files import write_frame

    rows = [
        (p.q_cost, p.q_reward, None if p.origin is None else p.origin.action,
         None if p.origin is None else p.origin.budget_allocation, is_vertex)
        for points, is_vertex in ((frontier.vertices, 1), (frontier.on_frontier, 0))
        for p in points
    ]
    frame = pandas.DataFrame(rows, columns=["q_cost", "q_reward", "action", "budget_allocation", "vertex"])
    return write_frame(frame.sort_values(["q_cost", "vertex"], kind="stable"), path)
