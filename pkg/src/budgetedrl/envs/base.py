from typing import Any, Dict, NamedTuple, Optional, Tuple

import gymnasium
import numpy

from budgetedrl.solvers.errors import EnvironmentFault

import logging
logger = logging.getLogger(__name__)


class EnvStep(NamedTuple):
    """Outcome of one environment step."""

    next_state: numpy.ndarray
    reward: float
    cost: float
    done: bool


def make_rng(seed) -> numpy.random.Generator:
    """The counter-based generator every environment and sampler draws from."""
    return numpy.random.Generator(numpy.random.Philox(seed))


class BudgetedEnv(gymnasium.Env):
    """
    Base class of budgeted environments.

    Follows the gymnasium interface; the cost signal of every step is returned as `info["cost"]`. Subclasses implement
    `_reset_state` and `_transition`, and set `action_space`, `observation_space`, `horizon` and `gamma`.

    Attributes:
        horizon (int): Maximal episode length; reaching it truncates the episode.
        gamma (float): Discount factor used to evaluate returns on this environment.
        rng (numpy.random.Generator): Episode randomness, reseeded by `reset(seed=...)`.
    """

    horizon: int = 1
    gamma: float = 1.0

    def __init__(self):
        super().__init__()
        self.rng = make_rng(0)
        self.t = 0
        self._done = False

    @property
    def n_actions(self) -> int:
        return int(self.action_space.n)

    def _reset_state(self) -> numpy.ndarray:
        raise NotImplementedError

    def _transition(self, action: int) -> EnvStep:
        raise NotImplementedError

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Tuple[numpy.ndarray, dict]:
        super().reset(seed=seed)
        if seed is not None:
            self.rng = make_rng(seed)
        self.t = 0
        self._done = False
        return self._reset_state(), {}

    def step(self, action) -> Tuple[numpy.ndarray, float, bool, bool, dict]:
        assert not self._done, "step() called on a finished episode, call reset() first"
        action = int(action)
        if not self.action_space.contains(action):
            raise EnvironmentFault(f"{type(self).__name__}: invalid action {action}")
        out = self._transition(action)
        self.t += 1
        truncated = not out.done and self.t >= self.horizon
        self._done = out.done or truncated
        return out.next_state, out.reward, out.done, truncated, {"cost": out.cost}
