from functools import partial

import numpy
import pytest

from budgetedrl.envs import make_env
from budgetedrl.envs.corridors import CorridorsEnv
from budgetedrl.solvers.bmdp import AugmentedAction, AugmentedState, BudgetedPolicy, BudgetGrid
from budgetedrl.solvers.errors import ConfigError
from budgetedrl.solvers.exploration import (
    LOG_COLUMNS,
    ExplorationConfig,
    collect_batch,
    epsilon_schedule,
    sample_initial_budget,
    sample_random_budgeted_action,
    sample_risk_neutral_action,
)

from conftest import philox

corridors = partial(make_env, "corridors", None)


class AlwaysLeft(BudgetedPolicy):
    def act(self, observation, budget, rng):
        return AugmentedAction(2, 0.0)


class FaultyCorridors(CorridorsEnv):
    def _transition(self, action):
        if self.t >= 2:
            raise RuntimeError("simulator crashed")
        return super()._transition(action)


def test_epsilon_schedule():
    assert epsilon_schedule(0, 0.1) == 1.0
    assert epsilon_schedule(10, 0.1) == pytest.approx(numpy.exp(-1.0))
    assert epsilon_schedule(1000, 0.1, floor=0.05) == 0.05


def test_config_keys_and_validation():
    cfg = ExplorationConfig.from_dict({"n_samples": 10, "n_minibatch": 3})
    assert cfg.minibatch_sizes == [3, 3, 4]
    with pytest.raises(ConfigError):
        ExplorationConfig.from_dict({"decay_unit": "hour"})
    with pytest.raises(ConfigError):
        ExplorationConfig.from_dict({"n_samples": 0})


def test_initial_budget_is_uniform_on_the_interval():
    rng = philox(0)
    draws = numpy.array([sample_initial_budget(rng, (0.2, 0.6)) for _ in range(2000)])
    assert draws.min() >= 0.2 and draws.max() <= 0.6
    assert draws.mean() == pytest.approx(0.4, abs=0.01)
    assert sample_initial_budget(rng, (0.3, 0.3)) == 0.3


@pytest.mark.parametrize("budget", [0.0, 0.1, 0.5, 0.9])
def test_uniform_random_action_respects_budget_in_expectation(budget):
    rng = philox(1)
    draws = [sample_random_budgeted_action(AugmentedState(None, budget), 3, (0.0, 1.0), rng) for _ in range(4000)]
    allocations = numpy.array([d.budget_allocation for d in draws])
    assert allocations.max() <= min(2 * budget, 1.0)
    assert allocations.mean() <= budget + 3 * allocations.std() / numpy.sqrt(len(draws)) + 1e-12
    assert {d.action for d in draws} <= {0, 1, 2}


def test_dirichlet_random_action_lands_on_the_grid():
    rng = philox(2)
    grid = BudgetGrid([0.0, 0.5, 1.0])
    for budget in (0.0, 0.3, 1.0):
        action = sample_random_budgeted_action(AugmentedState(None, budget), 2, (0.0, 1.0), rng, "dirichlet", grid)
        assert action.budget_allocation in grid.values
    assert sample_random_budgeted_action(AugmentedState(None, 0.0), 2, (0.0, 1.0), rng, "dirichlet", grid).budget_allocation == 0.0


def test_risk_neutral_action_ignores_budget():
    rng = philox(3)
    allocations = numpy.array([sample_risk_neutral_action(2, (0.0, 1.0), rng).budget_allocation for _ in range(2000)])
    assert allocations.mean() == pytest.approx(0.5, abs=0.03)


def test_random_collection_threads_budgets():
    cfg = ExplorationConfig(total_samples=120, minibatches=2, episodes_per_round=4)
    result = collect_batch(corridors, cfg, seed=0, budget_space=(0.0, 1.0))
    batch, ids = result.batch, result.episode_ids
    assert len(batch) == 120 and ids.shape == (120,)
    assert result.error is None and result.n_trainings == 0
    same_episode = ids[1:] == ids[:-1]
    numpy.testing.assert_array_equal(batch.budgets[1:][same_episode], batch.allocations[:-1][same_episode])
    assert list(result.log.columns) == list(LOG_COLUMNS)
    assert numpy.all((batch.budgets >= 0.0) & (batch.budgets <= 1.0))


def test_collection_does_not_depend_on_workers():
    cfg = ExplorationConfig(total_samples=60, minibatches=1, episodes_per_round=4)
    serial = collect_batch(corridors, cfg, seed=3, budget_space=(0.0, 1.0))
    cfg.workers = 2
    parallel = collect_batch(corridors, cfg, seed=3, budget_space=(0.0, 1.0))
    for name in ("states", "budgets", "actions", "allocations", "rewards", "costs", "next_states", "dones"):
        numpy.testing.assert_array_equal(getattr(serial.batch, name), getattr(parallel.batch, name))


def test_greedy_policy_is_retrained_between_minibatches():
    calls = []

    def train(batch):
        calls.append(len(batch))
        return AlwaysLeft()

    cfg = ExplorationConfig(total_samples=90, minibatches=3, episodes_per_round=2, epsilon_decay=10.0)
    result = collect_batch(corridors, cfg, seed=0, budget_space=(0.0, 1.0), train=train, train_final=True)
    assert calls == [30, 60, 90]
    assert result.n_trainings == 3 and isinstance(result.policy, AlwaysLeft)
    # epsilon is ~0 after the first round, so later minibatches follow the greedy policy
    tail = result.batch.subset(slice(60, 90))
    assert numpy.all(tail.actions == 2) and numpy.all(tail.allocations == 0.0)


def test_pure_random_exploration_skips_training():
    cfg = ExplorationConfig(total_samples=20, minibatches=2, epsilon_floor=1.0, episodes_per_round=2)
    result = collect_batch(corridors, cfg, seed=0, budget_space=(0.0, 1.0), train=lambda b: AlwaysLeft())
    assert result.n_trainings == 0 and result.policy is None


def test_environment_fault_keeps_partial_batch():
    cfg = ExplorationConfig(total_samples=50, minibatches=2, episodes_per_round=2)
    result = collect_batch(FaultyCorridors, cfg, seed=0, budget_space=(0.0, 1.0))
    assert "simulator crashed" in result.error
    assert len(result.batch) == 2


def test_epsilon_pinned_at_one_skips_intermediate_training():
    calls = []

    def train(batch):
        calls.append(len(batch))
        return AlwaysLeft()

    cfg = ExplorationConfig(total_samples=60, minibatches=3, episodes_per_round=2, epsilon_decay=0.0, epsilon_floor=0.5)
    result = collect_batch(corridors, cfg, seed=0, budget_space=(0.0, 1.0), train=train)
    assert calls == [] and result.n_trainings == 0 and result.policy is None
    result = collect_batch(corridors, cfg, seed=0, budget_space=(0.0, 1.0), train=train, train_final=True)
    assert calls == [60] and result.n_trainings == 1 and isinstance(result.policy, AlwaysLeft)


def test_risk_sensitive_batch_covers_low_budgets():
    def batch(strategy):
        cfg = ExplorationConfig(total_samples=2000, minibatches=1, strategy=strategy)
        return collect_batch(corridors, cfg, seed=7, budget_space=(0.0, 1.0)).batch

    sensitive, neutral = batch("risk_sensitive"), batch("risk_neutral")
    assert numpy.mean(sensitive.budgets <= 0.25) > numpy.mean(neutral.budgets <= 0.25) + 0.1
    assert numpy.all(sensitive.allocations <= 2 * sensitive.budgets + 1e-12)
    assert numpy.any(neutral.allocations > 2 * neutral.budgets)
