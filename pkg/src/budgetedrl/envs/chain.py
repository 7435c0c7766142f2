"""Small generated finite BMDPs, and an environment simulating any finite BMDP."""
from dataclasses import dataclass
from typing import Optional

import gymnasium
import numpy

from budgetedrl.solvers.bmdp import BudgetedMdp

from .base import BudgetedEnv, EnvStep, make_rng

import logging
logger = logging.getLogger(__name__)

SAFE, RISKY = 0, 1


def finite_chain_bmdp(
    n_states: int, seed: int = 0, gamma: float = 0.9, deterministic: bool = False, budget_max: float = 1.0
) -> BudgetedMdp:
    """
    Generate a small BMDP with one safe and one risky action per state.

    The safe action costs nothing and pays a reward in [0, 0.3]; the risky action pays a reward in [0.5, 1] and costs
    between 0.05 and 0.2. Transition rows are Dirichlet draws, or random one-hot rows when `deterministic`.

    Args:
        n_states (int): Number of states, at least 2.
        seed (int): Generation seed; equal seeds give identical tables.
        gamma (float): Discount factor.
        deterministic (bool): Deterministic transitions.
        budget_max (float): Upper end of the budget interval [0, budget_max].

    Examples:
        >>> mdp = finite_chain_bmdp(3, seed=0)
        >>> mdp.transition.shape, mdp.n_actions
        ((3, 2, 3), 2)
    """
    assert n_states >= 2, f"a chain needs at least two states, got {n_states}"
    rng = make_rng(seed)
    shape = (n_states, 2)
    if deterministic:
        transition = numpy.zeros(shape + (n_states,))
        targets = rng.integers(n_states, size=shape)
        numpy.put_along_axis(transition, targets[..., None], 1.0, axis=-1)
    else:
        transition = rng.dirichlet(numpy.ones(n_states), size=shape)
        transition /= transition.sum(axis=-1, keepdims=True)
    reward = numpy.empty(shape)
    cost = numpy.zeros(shape)
    reward[:, SAFE] = rng.uniform(0.0, 0.3, n_states)
    reward[:, RISKY] = rng.uniform(0.5, 1.0, n_states)
    cost[:, RISKY] = rng.uniform(0.05, 0.2, n_states)
    return BudgetedMdp(transition, reward, cost, gamma, 0.0, budget_max)


@dataclass
class ChainConfig:
    """Finite BMDP environment parameters; `mdp_path` loads a BMDP JSON file instead of generating a chain."""

    n_states: int = 3
    seed: int = 0
    gamma: float = 0.9
    deterministic: bool = False
    budget_max: float = 1.0
    start_state: int = 0
    horizon: Optional[int] = None
    mdp_path: Optional[str] = None

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "ChainConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)

    def build_mdp(self) -> BudgetedMdp:
        if self.mdp_path is not None:
            return BudgetedMdp.from_json(self.mdp_path)
        return finite_chain_bmdp(self.n_states, self.seed, self.gamma, self.deterministic, self.budget_max)


class FiniteBmdpEnv(BudgetedEnv):
    """
    Simulates a finite BMDP behind the environment interface, with one-hot observations.

    The default horizon is the smallest H with γ^H < 1e-6, so truncation error is negligible for γ < 1.
    """

    def __init__(self, mdp: BudgetedMdp, start_state: int = 0, horizon: Optional[int] = None):
        super().__init__()
        mdp.check_indices(start_state)
        self.mdp, self.start_state = mdp, start_state
        self.gamma = mdp.gamma
        if horizon is None:
            assert 0 < mdp.gamma < 1, "an explicit horizon is needed unless 0 < gamma < 1"
            horizon = int(numpy.ceil(numpy.log(1e-6) / numpy.log(mdp.gamma)))
        self.horizon = horizon
        self.action_space = gymnasium.spaces.Discrete(mdp.n_actions)
        self.observation_space = gymnasium.spaces.Box(0.0, 1.0, shape=(mdp.n_states,), dtype=numpy.float64)
        self._cumulative = numpy.cumsum(mdp.transition, axis=-1)
        self.state = start_state

    @classmethod
    def from_config(cls, config: ChainConfig) -> "FiniteBmdpEnv":
        return cls(config.build_mdp(), config.start_state, config.horizon)

    def _observe(self) -> numpy.ndarray:
        obs = numpy.zeros(self.mdp.n_states)
        obs[self.state] = 1.0
        return obs

    def _reset_state(self) -> numpy.ndarray:
        self.state = self.start_state
        return self._observe()

    def _transition(self, action: int) -> EnvStep:
        s = self.state
        u = self.rng.random()
        self.state = min(int(numpy.searchsorted(self._cumulative[s, action], u, side="right")), self.mdp.n_states - 1)
        done = bool(self.mdp.terminal[self.state])
        return EnvStep(self._observe(), float(self.mdp.reward[s, action]), float(self.mdp.cost[s, action]), done)
