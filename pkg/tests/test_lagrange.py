from functools import partial

import numpy
import pytest

from budgetedrl.envs import make_env
from budgetedrl.envs.chain import RISKY, SAFE, finite_chain_bmdp
from budgetedrl.solvers.bmdp import TransitionBatch
from budgetedrl.solvers.errors import ConfigError, ConvergenceError, DomainError
from budgetedrl.solvers.evaluation import evaluate_policy
from budgetedrl.solvers.lagrange import (
    CalibratedMixture,
    CalibrationCurve,
    LagrangeConfig,
    LagrangianPolicy,
    calibrate,
    calibrate_from_curve,
    calibration_curve,
    ftq_train,
    lagrangian_value_iteration,
    lambda_grid,
    train_lambda_policies,
)
from budgetedrl.solvers.regressors import RegressorSpec

from conftest import philox

CHAIN = {"n_states": 3, "seed": 0, "gamma": 0.9, "horizon": 30}


def _pairs_batch(mdp):
    """One transition per (state, action) to the most likely next state, one-hot states."""
    eye = numpy.eye(mdp.n_states)
    s, a = (x.ravel() for x in numpy.meshgrid(numpy.arange(mdp.n_states), numpy.arange(mdp.n_actions), indexing="ij"))
    nxt = mdp.transition[s, a].argmax(axis=1)
    zeros = numpy.zeros(s.size)
    return TransitionBatch(eye[s], zeros, a, zeros, mdp.reward[s, a], mdp.cost[s, a], eye[nxt], numpy.zeros(s.size, bool))


def test_lambda_grid():
    numpy.testing.assert_allclose(lambda_grid(0.1, 1000.0, 4), [0.0, 0.1, 10.0, 1000.0])
    numpy.testing.assert_allclose(lambda_grid(1.0, 100.0, 3, include_zero=False), [1.0, 10.0, 100.0])
    assert lambda_grid(1.0, 2.0, 1).tolist() == [0.0]


def test_config_grid_and_keys():
    cfg = LagrangeConfig.from_dict({"lambdas": [5, 0, 1], "epoch_ftq": 4, "n_rollouts_calibration": 50})
    assert cfg.grid.tolist() == [0.0, 1.0, 5.0]
    assert cfg.ftq_epochs == 4 and cfg.n_rollouts == 50
    assert len(LagrangeConfig(n_lambdas=6).grid) == 6
    with pytest.raises(ConfigError):
        LagrangeConfig.from_dict({"lambdas": [-1.0]})
    with pytest.raises(ConfigError):
        LagrangeConfig.from_dict({"deviation_margin": -0.5})


def test_calibrate_interpolates_between_flanking_policies():
    curve = CalibrationCurve([0.0, 1.0, 10.0], [0.9, 0.4, 0.0], [0.1, 0.1, 0.0], [3.0, 2.0, 1.0])
    safe, risky, weight, infeasible = calibrate_from_curve(curve, 0.5)
    assert (safe, risky, infeasible) == (1, 0, False)
    assert weight == pytest.approx(0.2)
    assert calibrate_from_curve(curve, 0.2)[:3] == (2, 1, pytest.approx(0.5))


def test_calibrate_edge_cases():
    curve = CalibrationCurve([0.0, 1.0], [0.8, 0.2], [0.0, 0.0], [2.0, 1.0])
    safe, risky, weight, infeasible = calibrate_from_curve(curve, 0.5)
    assert (safe, risky, infeasible) == (1, 0, False) and weight == pytest.approx(0.5)
    assert calibrate_from_curve(curve, 0.9) == (0, 0, 0.0, False)
    assert calibrate_from_curve(curve, 0.1) == (1, 1, 0.0, True)


def test_calibrate_with_deviation_margin():
    curve = CalibrationCurve([0.0, 1.0], [0.8, 0.2], [0.1, 0.1], [2.0, 1.0])
    safe, risky, weight, _ = calibrate_from_curve(curve, 0.5, deviation_margin=1.0)
    assert (safe, risky) == (1, 0)
    assert weight == pytest.approx((0.5 - 0.3) / 0.6)


def test_calibration_curve_sorting_and_csv(tmp_path):
    curve = CalibrationCurve([10.0, 0.0], [0.0, 0.9], [0.0, 0.2], [1.0, 3.0], n_rollouts=20)
    assert curve.lambdas.tolist() == [0.0, 10.0]
    assert curve.mean_cost.tolist() == [0.9, 0.0]
    loaded = CalibrationCurve.from_csv(curve.to_csv(tmp_path / "calibration.csv"))
    numpy.testing.assert_array_equal(loaded.mean_reward, curve.mean_reward)
    with pytest.raises(DomainError):
        CalibrationCurve([0.0], [numpy.nan], [0.0], [1.0])
    with pytest.raises(FileNotFoundError):
        CalibrationCurve.from_csv(tmp_path / "missing.csv")


def test_value_iteration_large_lambda_is_safe(chain_mdp):
    q, report = lagrangian_value_iteration(chain_mdp, 100.0)
    assert report.converged
    assert numpy.all(q.argmax(axis=1) == SAFE)


def test_value_iteration_strict_cap(chain_mdp):
    _, report = lagrangian_value_iteration(chain_mdp, 0.0, max_iters=3)
    assert not report.converged
    with pytest.raises(ConvergenceError):
        lagrangian_value_iteration(chain_mdp, 0.0, max_iters=3, strict=True)


@pytest.mark.parametrize("lam", [0.0, 2.0])
def test_tabular_ftq_reproduces_value_iteration(lam):
    mdp = finite_chain_bmdp(4, seed=7, gamma=0.8, deterministic=True)
    cfg = LagrangeConfig(gamma=mdp.gamma, ftq_epochs=8, regressor=RegressorSpec(kind="tabular"))
    q, report = ftq_train(_pairs_batch(mdp), mdp.n_actions, lam, cfg)
    expected, _ = lagrangian_value_iteration(mdp, lam, tol=0.0, max_iters=8)
    assert report.iterations == 8
    numpy.testing.assert_allclose(q.predict_actions(numpy.eye(4)), expected, atol=1e-12)


def test_ftq_rejects_bad_inputs(chain_mdp):
    cfg = LagrangeConfig(regressor=RegressorSpec(kind="tabular"))
    with pytest.raises(DomainError):
        ftq_train(_pairs_batch(chain_mdp), 2, -1.0, cfg)
    empty = TransitionBatch(numpy.zeros((0, 1)), [], [], [], [], [], numpy.zeros((0, 1)), [])
    with pytest.raises(DomainError):
        ftq_train(empty, 2, 0.0, cfg)


def test_lambda_training_does_not_depend_on_workers(chain_mdp):
    spec = RegressorSpec(hidden_layers=(8,), epochs=5)
    batch = _pairs_batch(chain_mdp)
    serial = train_lambda_policies(batch, 2, LagrangeConfig(lambdas=[1.0, 0.0], ftq_epochs=2, regressor=spec), seed=4)
    parallel = train_lambda_policies(
        batch, 2, LagrangeConfig(lambdas=[1.0, 0.0], ftq_epochs=2, regressor=spec, workers=2), seed=4
    )
    assert [lam for lam, _, _ in serial] == [0.0, 1.0]
    for (_, q1, _), (_, q2, _) in zip(serial, parallel):
        numpy.testing.assert_allclose(q1.predict_actions(batch.states), q2.predict_actions(batch.states), rtol=1e-10)


def test_calibrated_mixture_follows_one_policy_per_episode():
    with pytest.raises(DomainError):
        CalibratedMixture(LagrangianPolicy(numpy.zeros((1, 2))), LagrangianPolicy(numpy.zeros((1, 2))), 1.5)
    first = LagrangianPolicy(numpy.array([[1.0, 0.0]]))
    second = LagrangianPolicy(numpy.array([[0.0, 1.0]]))
    mix = CalibratedMixture(first, second, 0.3)
    rng = philox(0)
    picks = []
    for _ in range(4000):
        mix.begin_episode(rng)
        actions = {mix.act(numpy.array([0.0]), 0.4, rng).action for _ in range(5)}
        assert len(actions) == 1
        picks.append(actions.pop())
    assert numpy.mean(picks) == pytest.approx(0.3, abs=0.03)


def test_lagrangian_policy_passes_the_budget_through():
    policy = LagrangianPolicy(numpy.array([[0.0, 1.0], [2.0, 1.0]]))
    action = policy.act(numpy.array([0.0, 1.0]), 0.37, philox(0))
    assert (action.action, action.budget_allocation) == (0, 0.37)


def test_calibration_needs_rollouts():
    policies = [LagrangianPolicy(numpy.zeros((3, 2)), 0.0)]
    env_factory = partial(make_env, "chain", CHAIN)
    with pytest.raises(DomainError):
        calibration_curve(policies, env_factory, 0, seed=0)
    with pytest.raises(DomainError):
        calibrate(policies, env_factory, 0.5, 0, seed=0)


def test_calibrated_mixture_spends_the_budget():
    env_factory = partial(make_env, "chain", CHAIN)
    always_safe, always_risky = numpy.tile(numpy.eye(2)[SAFE], (3, 1)), numpy.tile(numpy.eye(2)[RISKY], (3, 1))
    policies = [LagrangianPolicy(always_safe, 100.0), LagrangianPolicy(always_risky, 0.0)]
    curve = calibration_curve(policies, env_factory, 500, seed=1)
    assert curve.lambdas.tolist() == [0.0, 100.0]
    assert curve.mean_cost[1] == 0.0 and curve.mean_cost[0] > 0.0
    assert curve.n_rollouts == 1000

    beta = 0.5 * curve.mean_cost[0]
    mixture, reused = calibrate(policies, env_factory, beta, 500, seed=1, curve=curve)
    assert reused is curve
    assert mixture.weight == pytest.approx(0.5)
    result = evaluate_policy(mixture, env_factory, beta, 2000, seed=2)
    assert result.mean_return_c == pytest.approx(beta, abs=0.05 * curve.mean_cost[0] + 4 * result.standard_errors()[1])
