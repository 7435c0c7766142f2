import numpy
import pandas
import pytest

from budgetedrl.envs.chain import finite_chain_bmdp
from budgetedrl.solvers.bftq import (
    BftqConfig,
    BftqReport,
    HullPolicy,
    _hull_continuations,
    bftq_train,
    compute_targets,
    policy_from_q,
)
from budgetedrl.solvers.bmdp import BudgetGrid, GriddedQ, TransitionBatch
from budgetedrl.solvers.budgeted_dp import budgeted_value_iteration, sampled_backup
from budgetedrl.solvers.errors import ConfigError, DomainError, RegressorDivergenceError
from budgetedrl.solvers.hull import hull_mixture
from budgetedrl.solvers.regressors import NeuralRegressor, RegressorSpec

from conftest import philox


def exhaustive_batch(mdp, grid, dones=None):
    """One transition per (state, action, grid allocation), next state drawn as the most likely one."""
    eye = numpy.eye(mdp.n_states)
    s, a, g = (x.ravel() for x in numpy.meshgrid(
        numpy.arange(mdp.n_states), numpy.arange(mdp.n_actions), numpy.arange(len(grid)), indexing="ij"))
    nxt = mdp.transition[s, a].argmax(axis=1)
    dones = numpy.zeros(s.size, dtype=bool) if dones is None else dones
    return TransitionBatch(
        eye[s], grid.values[g], a, grid.values[g], mdp.reward[s, a], mdp.cost[s, a], eye[nxt], dones
    )


def test_config_from_parameter_table():
    cfg = BftqConfig.from_dict({"budget_grid": [0, 0.25, 1], "epoch_ftq": 3, "regressor": {"kind": "tabular"}})
    assert len(cfg.grid) == 5 and cfg.ftq_epochs == 3
    assert cfg.regressor.kind == "tabular"
    with pytest.raises(ConfigError):
        BftqConfig.from_dict({"gamma": 2.0})
    with pytest.raises(ConfigError):
        BftqConfig.from_dict({"n_epochs": 3})


def test_bftq_with_tabular_regressor_reproduces_bvi(coarse_grid):
    mdp = finite_chain_bmdp(4, seed=3, gamma=0.9, deterministic=True)
    cfg = BftqConfig(grid=coarse_grid, gamma=mdp.gamma, ftq_epochs=6, regressor=RegressorSpec(kind="tabular"))
    q, report = bftq_train(exhaustive_batch(mdp, coarse_grid), mdp.n_actions, cfg)
    bvi, _ = budgeted_value_iteration(mdp, coarse_grid, tol=0.0, max_iters=6)
    assert report.iterations == 6
    numpy.testing.assert_allclose(q.predict_grid(numpy.eye(4), coarse_grid.values), bvi.table, atol=1e-10)


def test_targets_match_sampled_backup(chain_mdp, coarse_grid):
    q = GriddedQ(philox(2).random((3, 2, len(coarse_grid), 2)), coarse_grid)
    dones = philox(3).random(3 * 2 * len(coarse_grid)) < 0.2
    batch = exhaustive_batch(chain_mdp, coarse_grid, dones)
    cfg = BftqConfig(grid=coarse_grid, gamma=chain_mdp.gamma)
    targets = compute_targets(batch, q, cfg)
    for i, t in enumerate(batch.transitions()):
        numpy.testing.assert_allclose(targets[i], sampled_backup(q, t, coarse_grid, cfg.gamma), atol=1e-12)
    numpy.testing.assert_array_equal(targets[dones], numpy.column_stack([batch.rewards, batch.costs])[dones])


def test_targets_do_not_depend_on_workers(small_spec, coarse_grid):
    rng = philox(0)
    n = 40
    batch = TransitionBatch(
        rng.normal(size=(n, 2)), rng.random(n), rng.integers(2, size=n), rng.random(n), rng.random(n),
        rng.random(n), rng.normal(size=(n, 2)), rng.random(n) < 0.1,
    )
    q = NeuralRegressor(2, 2, small_spec, seed=1)
    serial = compute_targets(batch, q, BftqConfig(grid=coarse_grid, gamma=0.9, workers=1))
    parallel = compute_targets(batch, q, BftqConfig(grid=coarse_grid, gamma=0.9, workers=3))
    numpy.testing.assert_array_equal(serial, parallel)


def test_hull_continuations_share_frontiers_between_equal_next_states():
    rng = philox(4)
    distinct = rng.random((3, 2, 4, 2))
    values = distinct[[0, 1, 0, 2, 1, 0]]
    betas = numpy.array([0.1, 0.5, 0.9, 0.0, 0.3, 0.5])
    out, infeasible = _hull_continuations(values, betas)
    for i, beta in enumerate(betas):
        costs, rewards = values[i, :, :, 1].ravel(), values[i, :, :, 0].ravel()
        k, m, w, flag = hull_mixture(costs, rewards, beta)
        assert out[i] == pytest.approx([(1 - w) * rewards[k] + w * rewards[m], (1 - w) * costs[k] + w * costs[m]])
        assert infeasible[i] == flag


@pytest.mark.slow
def test_targets_on_a_large_batch_do_not_depend_on_workers(small_spec):
    rng = philox(5)
    n = 5000
    grid = BudgetGrid.uniform(0.0, 0.05, 1.0)
    batch = TransitionBatch(
        rng.normal(size=(n, 2)), rng.random(n), rng.integers(4, size=n), rng.random(n), rng.random(n),
        rng.random(n), rng.normal(size=(n, 2)), rng.random(n) < 0.1,
    )
    q = NeuralRegressor(2, 4, small_spec, seed=2)
    serial = compute_targets(batch, q, BftqConfig(grid=grid, gamma=0.9, workers=1))
    parallel = compute_targets(batch, q, BftqConfig(grid=grid, gamma=0.9, workers=4))
    numpy.testing.assert_array_equal(serial, parallel)


def test_target_clip(chain_mdp, coarse_grid):
    q = GriddedQ(numpy.full((3, 2, len(coarse_grid), 2), 10.0), coarse_grid)
    cfg = BftqConfig(grid=coarse_grid, gamma=0.9, target_clip=(0.0, 2.0))
    targets = compute_targets(exhaustive_batch(chain_mdp, coarse_grid), q, cfg)
    assert targets.max() <= 2.0 and targets.min() >= 0.0


def test_empty_batch_raises(coarse_grid):
    empty = TransitionBatch(numpy.zeros((0, 1)), [], [], [], [], [], numpy.zeros((0, 1)), [])
    cfg = BftqConfig(grid=coarse_grid)
    with pytest.raises(DomainError):
        compute_targets(empty, GriddedQ.zeros(1, 2, coarse_grid), cfg)
    with pytest.raises(DomainError):
        bftq_train(empty, 2, cfg)


def test_divergence_carries_outer_iteration(chain_mdp, coarse_grid):
    spec = RegressorSpec(
        hidden_layers=(16,), activation="tanh", learning_rate=1e6, divergence_factor=10.0, epochs=5, weight_decay=0.0
    )
    cfg = BftqConfig(grid=coarse_grid, gamma=0.9, ftq_epochs=3, regressor=spec)
    with pytest.raises(RegressorDivergenceError) as info:
        bftq_train(exhaustive_batch(chain_mdp, coarse_grid), 2, cfg)
    assert info.value.iteration == 1
    assert "outer iteration 1" in str(info.value)


def test_convergence_tolerance_stops_early(chain_mdp, coarse_grid):
    cfg = BftqConfig(grid=coarse_grid, gamma=0.9, ftq_epochs=10, regressor=RegressorSpec(kind="tabular"),
                     convergence_tol=1e9)
    _, report = bftq_train(exhaustive_batch(chain_mdp, coarse_grid), 2, cfg)
    assert report.converged and report.iterations == 2


def test_report_csv(tmp_path):
    report = BftqReport()
    report.append(1, 0.5, 0.1, 2)
    frame = pandas.read_csv(report.to_csv(tmp_path / "report.csv"))
    assert list(frame.columns) == ["iteration", "target_change", "fit_loss", "infeasibility_count"]
    assert frame.iloc[0].tolist() == [1, 0.5, 0.1, 2]


def test_hull_policy_acts_on_the_grid(tmp_path, coarse_grid):
    table = philox(4).random((3, 2, len(coarse_grid), 2))
    policy = policy_from_q(GriddedQ(table, coarse_grid), BftqConfig(grid=coarse_grid), debug_dir=tmp_path)
    assert isinstance(policy, HullPolicy)
    rng = philox(0)
    for budget in (0.0, 0.37, 1.0):
        action = policy.act(numpy.eye(3)[1], budget, rng)
        assert action.action in (0, 1)
        assert action.budget_allocation in coarse_grid.values
    assert policy.n_decisions == 3
    assert len(list(tmp_path.glob("frontier_*.csv"))) == 3


def test_hull_policy_counts_infeasible_decisions():
    grid = BudgetGrid([0.0, 0.5, 1.0])
    table = numpy.zeros((1, 2, 3, 2))
    table[..., 1] = 0.4
    policy = HullPolicy(GriddedQ(table, grid), grid)
    mix = policy.mixture(numpy.array([0.0]), 0.1)
    assert mix.infeasible and policy.n_infeasible == 1
