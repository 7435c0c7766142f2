"""
Slot-filling dialogue simulator: the system fills slots by asking the user orally (noisy recognition) or through a
numeric pad (exact, but the user may hang up), then summarises.
"""
from dataclasses import dataclass
from typing import Optional

import gymnasium
import numpy
from scipy.special import expit

from .base import BudgetedEnv, EnvStep

import logging
logger = logging.getLogger(__name__)

INFORM, DENY_SUMMARIZE, HANG_UP = range(3)
USER_ACTS = ("INFORM", "DENY_SUMMARIZE", "HANG_UP")
ASK_ORAL, ASK_NUM_PAD, SUMMARIZE_AND_INFORM = range(3)
SYSTEM_ACTS = ("ASK_ORAL", "ASK_NUM_PAD", "SUMMARIZE_AND_INFORM")


@dataclass
class SlotFillingConfig:
    """Dialogue parameters: sentence error rate, recognition score model, hang-up probability and horizon."""

    n_slots: int = 3
    ser: float = 0.6
    mu_understand: float = 0.25
    mu_misunderstand: float = -0.25
    sigma: float = 0.6
    hangup_prob: float = 0.25
    horizon: int = 10
    gamma: float = 1.0

    KEYMAP = {"mu_u": "mu_understand", "mu_m": "mu_misunderstand", "p": "hangup_prob", "episode_duration": "horizon"}

    def __post_init__(self):
        for name in ("ser", "hangup_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability, got {getattr(self, name)}")
        if self.sigma < 0 or self.n_slots < 1 or self.horizon < 1:
            raise ValueError("sigma must be nonnegative, n_slots and horizon positive")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "SlotFillingConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)


@dataclass
class DialogueState:
    """Hidden dialogue state; `correct` is not observed, `srs` is 0 for slots never filled."""

    srs: numpy.ndarray
    correct: numpy.ndarray
    last_user_act: int = -1
    last_system_act: int = -1
    t: int = 0

    @classmethod
    def initial(cls, n_slots: int) -> "DialogueState":
        return cls(numpy.zeros(n_slots), numpy.zeros(n_slots, dtype=bool))

    def copy(self) -> "DialogueState":
        return DialogueState(self.srs.copy(), self.correct.copy(), self.last_user_act, self.last_system_act, self.t)


def n_actions(config: SlotFillingConfig) -> int:
    """ask_oral(i) for every slot, then ask_num_pad(i), then summarize_and_inform."""
    return 2 * config.n_slots + 1


def decode_action(action: int, config: SlotFillingConfig):
    """(system act, slot index or None) of an action index."""
    if action < config.n_slots:
        return ASK_ORAL, action
    if action < 2 * config.n_slots:
        return ASK_NUM_PAD, action - config.n_slots
    return SUMMARIZE_AND_INFORM, None


def encode(state: DialogueState, config: SlotFillingConfig) -> numpy.ndarray:
    """
    Observation vector: srs per slot, one-hot argmin srs, one-hot last user act, one-hot last system act, t/H.

    Before the first turn both last-act blocks are zero.
    """
    n = config.n_slots
    obs = numpy.zeros(2 * n + len(USER_ACTS) + len(SYSTEM_ACTS) + 1)
    obs[:n] = state.srs
    obs[n + int(numpy.argmin(state.srs))] = 1.0
    if state.last_user_act >= 0:
        obs[2 * n + state.last_user_act] = 1.0
    if state.last_system_act >= 0:
        obs[2 * n + len(USER_ACTS) + state.last_system_act] = 1.0
    obs[-1] = state.t / config.horizon
    return obs


def sample_srs(understood: bool, rng: numpy.random.Generator, config: SlotFillingConfig) -> float:
    """Speech recognition score 1/(1 + exp(-x)) with x ~ N(μ_u or μ_m, σ)."""
    mu = config.mu_understand if understood else config.mu_misunderstand
    return float(expit(rng.normal(mu, config.sigma)))


def slot_filling_step(state: DialogueState, action: int, rng: numpy.random.Generator, config: SlotFillingConfig):
    """
    One dialogue turn.

    Returns:
        (Tuple[DialogueState, EnvStep]): The new hidden state and the step outcome (observation of the new state).
    """
    state = state.copy()
    act, slot = decode_action(int(action), config)
    state.last_system_act = act
    state.t += 1
    reward = cost = 0.0
    done = False
    if act == ASK_ORAL:
        understood = rng.random() >= config.ser
        state.correct[slot] = understood
        state.srs[slot] = sample_srs(understood, rng, config)
        state.last_user_act = INFORM
    elif act == ASK_NUM_PAD:
        if rng.random() < config.hangup_prob:
            state.last_user_act = HANG_UP
            cost, done = 1.0, True
        else:
            state.correct[slot] = True
            state.srs[slot] = 1.0
            state.last_user_act = INFORM
    elif state.correct.all():
        reward, done = 1.0, True
    else:
        state.last_user_act = DENY_SUMMARIZE
    return state, EnvStep(encode(state, config), reward, cost, done)


class SlotFillingEnv(BudgetedEnv):
    """Slot-filling environment with 2·n_slots + 1 actions and a fixed-size observation vector."""

    def __init__(self, config: Optional[SlotFillingConfig] = None):
        super().__init__()
        self.config = config or SlotFillingConfig()
        self.horizon, self.gamma = self.config.horizon, self.config.gamma
        self.action_space = gymnasium.spaces.Discrete(n_actions(self.config))
        size = 2 * self.config.n_slots + len(USER_ACTS) + len(SYSTEM_ACTS) + 1
        self.observation_space = gymnasium.spaces.Box(0.0, 1.0, shape=(size,), dtype=numpy.float64)
        self.state = DialogueState.initial(self.config.n_slots)

    def _reset_state(self) -> numpy.ndarray:
        self.state = DialogueState.initial(self.config.n_slots)
        return encode(self.state, self.config)

    def _transition(self, action: int) -> EnvStep:
        self.state, out = slot_filling_step(self.state, action, self.rng, self.config)
        return out

    def describe(self, action: int) -> dict:
        """Readable record of the last turn for dialogue transcripts."""
        act, slot = decode_action(int(action), self.config)
        name = SYSTEM_ACTS[act] if slot is None else f"{SYSTEM_ACTS[act]}({slot})"
        accepted = act == SUMMARIZE_AND_INFORM and self.state.correct.all()
        return {
            "turn": self.state.t - 1,
            "valid_slots": self.state.correct.astype(int).tolist(),
            "srs": [round(float(s), 2) if s > 0 else None for s in self.state.srs],
            "system": name,
            "user": "ACCEPT" if accepted else USER_ACTS[self.state.last_user_act],
        }
