import numpy
import pandas
import pytest

from budgetedrl.solvers.bmdp import AugmentedState, BudgetGrid, GriddedQ
from budgetedrl.solvers.errors import DomainError
from budgetedrl.solvers.hull import (
    QPoint,
    enumerate_actions,
    frontier_indices,
    frontier_to_csv,
    greedy_lp_oracle,
    greedy_policy_linprog,
    greedy_policy_lp_oracle,
    hull_mixture,
    hull_mixtures,
    pi_hull,
    prune_dominated,
    top_frontier,
)

from conftest import philox


def test_mixture_between_two_points():
    choice = hull_mixture(numpy.array([0.0, 1.0]), numpy.array([0.0, 1.0]), 0.5)
    assert (choice.first, choice.second, choice.weight, choice.infeasible) == (0, 1, 0.5, False)


def test_budget_above_every_cost_gives_dirac_on_best_reward():
    costs, rewards = numpy.array([0.0, 0.4, 0.7]), numpy.array([0.0, 1.0, 1.0])
    choice = hull_mixture(costs, rewards, 0.9)
    assert choice.first == choice.second == 1
    assert choice.weight == 0.0 and not choice.infeasible


def test_budget_below_every_cost_is_infeasible():
    costs, rewards = numpy.array([0.2, 0.5]), numpy.array([0.1, 1.0])
    choice = hull_mixture(costs, rewards, 0.1)
    assert choice.infeasible
    assert choice.first == choice.second == 0


def test_single_candidate():
    choice = hull_mixture(numpy.array([0.3]), numpy.array([2.0]), 0.5)
    assert (choice.first, choice.second, choice.weight, choice.infeasible) == (0, 0, 0.0, False)


def test_empty_candidates_raise():
    with pytest.raises(DomainError):
        hull_mixture(numpy.zeros(0), numpy.zeros(0), 0.5)
    with pytest.raises(DomainError):
        top_frontier([])


def test_prune_dominated():
    pts = [QPoint(0, 0), QPoint(1, 1), QPoint(2, 1)]
    assert [(p.q_cost, p.q_reward) for p in prune_dominated(pts)] == [(0, 0), (1, 1)]


def test_collinear_points_are_not_vertices():
    points = [QPoint(0.0, 0.0), QPoint(1.0, 1.0), QPoint(2.0, 2.0)]
    frontier = top_frontier(points)
    assert [(v.q_cost, v.q_reward) for v in frontier.vertices] == [(0.0, 0.0), (2.0, 2.0)]
    assert [(p.q_cost, p.q_reward) for p in frontier.on_frontier] == [(1.0, 1.0)]


def test_cost_ties_keep_the_best_reward():
    costs, rewards = numpy.array([0.5, 0.5, 0.0]), numpy.array([0.3, 0.9, 0.1])
    assert frontier_indices(costs, rewards).tolist() == [2, 1]


def test_random_frontiers_are_concave_and_increasing():
    rng = philox(4)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        points = [QPoint(c, r) for c, r in rng.random((n, 2))]
        frontier = top_frontier(points)
        frontier.check()
        costs = numpy.array([p.q_cost for p in points])
        rewards = numpy.array([p.q_reward for p in points])
        vc = numpy.array([v.q_cost for v in frontier.vertices])
        vr = numpy.array([v.q_reward for v in frontier.vertices])
        # no candidate lies above the frontier
        inside = (costs >= vc[0]) & (costs <= vc[-1])
        assert numpy.all(rewards[inside] <= numpy.interp(costs[inside], vc, vr) + 1e-9)


def test_hull_agrees_with_enumeration_oracle():
    rng = philox(7)
    for _ in range(500):
        n = int(rng.integers(2, 51))
        costs, rewards = rng.random(n), rng.normal(size=n)
        beta = float(rng.uniform(costs.min(), costs.max()))
        hull = hull_mixture(costs, rewards, beta)
        oracle = greedy_lp_oracle(costs, rewards, beta)
        numpy.testing.assert_allclose(hull.expectation(costs, rewards), oracle.expectation(costs, rewards), atol=1e-8)
        assert not hull.infeasible


def test_hull_agrees_with_linprog():
    rng = philox(8)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        costs, rewards = rng.random(n), rng.normal(size=n)
        beta = float(rng.uniform(costs.min(), costs.max()))
        reward, cost = hull_mixture(costs, rewards, beta).expectation(costs, rewards)
        lp_reward, lp_cost, infeasible = greedy_policy_linprog(costs, rewards, beta)
        assert not infeasible
        assert reward == pytest.approx(lp_reward, abs=1e-6)
        assert cost <= beta + 1e-9 and lp_cost <= beta + 1e-6


def test_infeasible_budget_matches_oracles():
    costs, rewards = numpy.array([0.3, 0.3, 0.8]), numpy.array([0.1, 0.5, 1.0])
    hull = hull_mixture(costs, rewards, 0.1)
    oracle = greedy_lp_oracle(costs, rewards, 0.1)
    assert hull.infeasible and oracle.infeasible
    assert hull.first == oracle.first == 1
    assert greedy_policy_linprog(costs, rewards, 0.1) == (0.5, 0.3, True)


def test_hull_mixtures_match_single_budget_calls():
    rng = philox(9)
    costs, rewards = rng.random(20), rng.random(20)
    betas = numpy.linspace(0.0, 1.0, 17)
    first, second, weight, infeasible = hull_mixtures(costs, rewards, betas)
    for k, beta in enumerate(betas):
        single = hull_mixture(costs, rewards, beta)
        assert (single.first, single.second, single.infeasible) == (first[k], second[k], infeasible[k])
        assert single.weight == weight[k]


def _gridded_q(grid, seed=0):
    rng = philox(seed)
    table = rng.random((2, 3, len(grid), 2))
    table[..., 1] = numpy.sort(table[..., 1], axis=2)
    table[..., 0] = numpy.sort(table[..., 0], axis=2)
    return GriddedQ(table, grid)


def test_pi_hull_spends_the_budget(coarse_grid):
    q = _gridded_q(coarse_grid)
    actions = enumerate_actions(q.n_actions, coarse_grid)
    costs, rewards = q.table[0, :, :, 1].ravel(), q.table[0, :, :, 0].ravel()
    vertices = frontier_indices(costs, rewards)
    low, high = costs[vertices[0]], costs[vertices[-1]]
    for beta in numpy.linspace(low, high, 7):
        state = AugmentedState(0, float(beta))
        mix = pi_hull(state, q, actions)
        assert not mix.infeasible
        assert mix.expectation(lambda a: q.evaluate(state, a)).cost == pytest.approx(beta, abs=1e-12)
    above = AugmentedState(0, float(high) + 1.0)
    assert pi_hull(above, q, actions).expectation(lambda a: q.evaluate(above, a)).cost == pytest.approx(high)


def test_pi_hull_matches_object_level_oracle(coarse_grid):
    q = _gridded_q(coarse_grid, seed=3)
    actions = enumerate_actions(q.n_actions, coarse_grid)
    for beta in (0.2, 0.45, 0.8):
        state = AugmentedState(1, beta)
        ours = pi_hull(state, q, actions).expectation(lambda a: q.evaluate(state, a))
        oracle = greedy_policy_lp_oracle(state, q, actions).expectation(lambda a: q.evaluate(state, a))
        numpy.testing.assert_allclose(ours, oracle, atol=1e-8)


def test_enumerate_actions_is_action_major():
    grid = BudgetGrid([0.0, 0.5, 1.0])
    actions = enumerate_actions(2, grid)
    assert [(a.action, a.budget_allocation) for a in actions[:4]] == [(0, 0.0), (0, 0.5), (0, 1.0), (1, 0.0)]


def test_frontier_csv(tmp_path):
    frontier = top_frontier([QPoint(0.0, 0.0), QPoint(1.0, 1.0), QPoint(2.0, 2.0), QPoint(1.0, 0.2)])
    frame = pandas.read_csv(frontier_to_csv(frontier, tmp_path / "frontier.csv"))
    assert list(frame.columns) == ["q_cost", "q_reward", "action", "budget_allocation", "vertex"]
    assert frame["vertex"].tolist() == [1, 0, 1]
