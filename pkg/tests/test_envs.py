import numpy
import pytest

from budgetedrl.envs import make_env
from budgetedrl.envs.base import make_rng
from budgetedrl.envs.chain import FiniteBmdpEnv, finite_chain_bmdp
from budgetedrl.envs.corridors import DOWN, LEFT, RIGHT, UP, CorridorsConfig, CorridorsLayout, corridors_step
from budgetedrl.envs.slot_filling import (
    ASK_NUM_PAD,
    SUMMARIZE_AND_INFORM,
    SlotFillingConfig,
    SlotFillingEnv,
    decode_action,
)
from budgetedrl.solvers.errors import ConfigError, EnvironmentFault
from budgetedrl.utils import CFG_DIR


def _corridors(**kwargs):
    return make_env("corridors", {"noise_std": [0.0, 0.0], **kwargs})


def _walk(env, actions):
    env.reset(seed=0)
    return [env.step(a) for a in actions]


def test_corridors_wall_blocks_the_middle():
    env = _corridors()
    obs, _ = env.reset(seed=0)
    numpy.testing.assert_array_equal(obs, [3.5, 0.5])
    nxt, reward, terminated, truncated, info = env.step(UP)
    numpy.testing.assert_array_equal(nxt, [3.5, 0.5])
    assert (reward, info["cost"], terminated, truncated) == (0.0, 0.0, False, False)


def test_corridors_safe_corridor_is_free():
    steps = _walk(_corridors(), [RIGHT] + [UP] * 5)
    assert [s[1] for s in steps[1:]] == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5])
    assert all(s[4]["cost"] == 0.0 for s in steps)
    assert steps[-1][2] and not any(s[2] for s in steps[:-1])


def test_corridors_risky_cost_only_at_terminal_depth():
    steps = _walk(_corridors(), [LEFT] + [UP] * 5)
    assert [s[1] for s in steps] == pytest.approx([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    assert [s[4]["cost"] for s in steps] == [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
    assert steps[-1][2] and not any(s[2] for s in steps[:-1])


def test_corridors_graded_layout_charges_every_depth():
    steps = _walk(_corridors(layout="corridors_layout_graded.yaml"), [LEFT, UP, UP, DOWN, UP])
    assert [s[1] for s in steps] == pytest.approx([0.0, 0.2, 0.4, 0.0, 0.4])
    assert [s[4]["cost"] for s in steps] == pytest.approx([0.0, 0.2, 0.2, 0.0, 0.2])


def test_corridors_truncates_at_horizon():
    env = _corridors(horizon=3)
    steps = _walk(env, [DOWN] * 3)
    assert [s[3] for s in steps] == [False, False, True]
    with pytest.raises(AssertionError):
        env.step(DOWN)


def test_invalid_action_is_an_environment_fault():
    env = _corridors()
    env.reset(seed=0)
    with pytest.raises(EnvironmentFault):
        env.step(7)


def test_corridors_noise_is_seeded():
    env = make_env("corridors")
    a = [s[0] for s in _walk(env, [RIGHT, UP, UP])]
    b = [s[0] for s in _walk(env, [RIGHT, UP, UP])]
    numpy.testing.assert_array_equal(a, b)


def test_corridors_step_function():
    layout = CorridorsLayout.load(CFG_DIR / "corridors_layout.yaml")
    out = corridors_step((1.0, 1.0), RIGHT, make_rng(0), layout, noise_std=(0.0, 0.0))
    numpy.testing.assert_array_equal(out.next_state, [2.0, 1.0])


def test_corridors_layout_validation():
    with pytest.raises(ConfigError):
        CorridorsLayout.from_dict({"rows": ["S..", "..S"]})
    with pytest.raises(ConfigError):
        CorridorsLayout.from_dict({"rows": ["S..", ".."]})
    with pytest.raises(ConfigError):
        CorridorsConfig(width=8).load_layout()


def test_make_env_rejects_unknown_names_and_keys():
    with pytest.raises(ConfigError):
        make_env("mountain_car")
    with pytest.raises(ConfigError):
        make_env("corridors", {"speed": 2})


def test_slot_filling_actions():
    cfg = SlotFillingConfig()
    env = SlotFillingEnv(cfg)
    assert env.n_actions == 7
    assert decode_action(4, cfg) == (ASK_NUM_PAD, 1)
    assert decode_action(6, cfg) == (SUMMARIZE_AND_INFORM, None)
    obs, _ = env.reset(seed=0)
    assert obs.shape == env.observation_space.shape
    assert obs[3] == 1.0 and obs.sum() == 1.0


def test_slot_filling_numpad_hang_up_costs():
    env = SlotFillingEnv(SlotFillingConfig(hangup_prob=1.0))
    env.reset(seed=0)
    _, reward, terminated, _, info = env.step(3)
    assert (reward, info["cost"], terminated) == (0.0, 1.0, True)
    assert env.describe(3)["user"] == "HANG_UP"


def test_slot_filling_success_after_filling_every_slot():
    env = SlotFillingEnv(SlotFillingConfig(hangup_prob=0.0))
    env.reset(seed=0)
    _, reward, terminated, _, _ = env.step(6)
    assert (reward, terminated) == (0.0, False)
    assert env.describe(6)["user"] == "DENY_SUMMARIZE"
    for slot in range(3):
        env.step(3 + slot)
    _, reward, terminated, _, info = env.step(6)
    assert (reward, info["cost"], terminated) == (1.0, 0.0, True)
    record = env.describe(6)
    assert record["user"] == "ACCEPT" and record["valid_slots"] == [1, 1, 1]


def test_slot_filling_oral_recognition_scores():
    env = SlotFillingEnv(SlotFillingConfig(ser=0.0))
    env.reset(seed=1)
    obs, _, _, _, info = env.step(0)
    assert 0.0 < obs[0] < 1.0 and info["cost"] == 0.0
    assert env.state.correct[0]


def test_slot_filling_is_seeded():
    env = SlotFillingEnv()
    a = [s[0] for s in _walk(env, [0, 1, 2, 6])]
    b = [s[0] for s in _walk(env, [0, 1, 2, 6])]
    numpy.testing.assert_array_equal(a, b)


def test_finite_bmdp_env_follows_the_tables():
    mdp = finite_chain_bmdp(4, seed=5, deterministic=True)
    env = FiniteBmdpEnv(mdp)
    obs, _ = env.reset(seed=0)
    state = 0
    for action in (0, 1, 1, 0):
        obs, reward, _, _, info = env.step(action)
        assert reward == mdp.reward[state, action] and info["cost"] == mdp.cost[state, action]
        state = int(mdp.transition[state, action].argmax())
        assert obs[state] == 1.0 and obs.sum() == 1.0
    assert env.horizon == 132


def test_chain_from_config():
    env = make_env("chain", {"n_states": 4, "seed": 2, "gamma": 0.5})
    assert env.mdp.n_states == 4 and env.gamma == 0.5
