"""
Budgeted MDP domain model: augmented states and actions, vector signals, budgeted policies, bi-valued Q-functions
and the Budgeted Bellman expectation operator on finite instances.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union
import json
import math

import numpy

from .errors import ConvergenceError, DomainError

import logging
logger = logging.getLogger(__name__)

STOCHASTIC_ATOL = 1e-12
GRID_ATOL = 1e-9


class VectorSignal(NamedTuple):
    """A (reward, cost) pair: one step's signal, a return G = (G_r, G_c) or a value (V_r, V_c)."""

    reward: float
    cost: float


class BudgetGrid:
    """
    Finite, strictly increasing discretisation of the budget interval [β_min, β_max].

    Every tabular computation (gridded Q-functions, hull targets, policy tables) indexes budgets through this grid.
    Budgets that do not lie on the grid are projected to the nearest grid value; `project` reports how many were.

    Attributes:
        values (numpy.ndarray): The grid values, float64, strictly increasing.

    Examples:
        >>> grid = BudgetGrid.uniform(0.0, 0.01, 1.0)
        >>> len(grid), grid.values[50]
        (101, 0.5)
        >>> idx, n_off = grid.project([0.333, 0.5])
        >>> idx.tolist(), n_off
        ([33, 50], 1)
    """

    def __init__(self, values: Sequence[float]):
        values = numpy.asarray(values, dtype=numpy.float64).ravel()
        if values.size == 0:
            raise DomainError("budget grid must contain at least one value")
        if not numpy.all(numpy.isfinite(values)):
            raise DomainError("budget grid values must be finite")
        if values.size > 1 and not numpy.all(numpy.diff(values) > 0):
            raise DomainError("budget grid must be strictly increasing")
        self.values = values
        self.values.setflags(write=False)

    @classmethod
    def from_config(cls, value) -> "BudgetGrid":
        """Accept a grid, a `[min, step, max]` triple, or `{"values": [...]}` for an explicit grid."""
        if isinstance(value, BudgetGrid):
            return value
        if isinstance(value, dict):
            return cls(value["values"])
        value = list(value)
        if len(value) != 3:
            raise DomainError(f"budget grid must be given as [min, step, max], got {value}")
        return cls.uniform(*(float(v) for v in value))

    @classmethod
    def uniform(cls, low: float, step: float, high: float) -> "BudgetGrid":
        """Build the grid `low:step:high`, both ends included (the `[min, step, max]` configuration form)."""
        if step <= 0 or high < low:
            raise DomainError(f"invalid budget grid specification [{low}, {step}, {high}]")
        n = int(round((high - low) / step)) + 1
        return cls(numpy.round(numpy.linspace(low, high, n), 12))

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"BudgetGrid(n={len(self)}, min={self.values[0]}, max={self.values[-1]})"

    def __eq__(self, other):
        return isinstance(other, BudgetGrid) and numpy.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist()}

    @property
    def budget_space(self) -> Tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])

    def nearest_index(self, betas) -> numpy.ndarray:
        """Index of the nearest grid value for every budget (ties go to the lower value)."""
        betas = numpy.asarray(betas, dtype=numpy.float64)
        right = numpy.clip(numpy.searchsorted(self.values, betas, side="left"), 0, len(self) - 1)
        left = numpy.clip(right - 1, 0, len(self) - 1)
        take_left = numpy.abs(betas - self.values[left]) <= numpy.abs(self.values[right] - betas)
        return numpy.where(take_left, left, right).astype(numpy.int64)

    def project(self, betas) -> Tuple[numpy.ndarray, int]:
        """
        Project budgets on the grid.

        Returns:
            (Tuple[numpy.ndarray, int]): Nearest grid indices and the number of budgets that were off-grid by more
                than 1e-9.
        """
        betas = numpy.asarray(betas, dtype=numpy.float64)
        idx = self.nearest_index(betas)
        n_off = int(numpy.count_nonzero(numpy.abs(self.values[idx] - betas) > GRID_ATOL))
        return idx, n_off

    def snap(self, betas):
        """Nearest grid value(s)."""
        idx = self.nearest_index(betas)
        snapped = self.values[idx]
        return float(snapped) if numpy.ndim(snapped) == 0 else snapped


@dataclass(frozen=True)
class AugmentedState:
    """
    A state paired with the budget the policy must respect from it.

    Use `AugmentedState.make` to clamp a budget into the budget space; the `clamped` flag records whether it was.
    """

    state: object
    budget: float
    clamped: bool = False

    @classmethod
    def make(cls, state, budget: float, budget_space: Tuple[float, float]) -> "AugmentedState":
        low, high = budget_space
        value = min(max(float(budget), low), high)
        if value != budget:
            logger.debug(f"budget {budget} clamped to {value}")
        return cls(state, value, clamped=value != budget)


@dataclass(frozen=True)
class AugmentedAction:
    """An action paired with the budget allocated to the next step."""

    action: int
    budget_allocation: float

    def validate(self, n_actions: int, budget_space: Tuple[float, float]) -> "AugmentedAction":
        if not 0 <= int(self.action) < n_actions:
            raise DomainError(f"action index {self.action} out of range [0, {n_actions})")
        low, high = budget_space
        if not low - GRID_ATOL <= self.budget_allocation <= high + GRID_ATOL:
            raise DomainError(f"budget allocation {self.budget_allocation} outside [{low}, {high}]")
        return self


@dataclass(frozen=True)
class MixturePolicy:
    """
    Probability-weighted pair of augmented actions: `second` is drawn with probability `weight`, `first` otherwise.

    A weight of 0 or 1 represents a Dirac. `infeasible` is raised when the budget was below every achievable cost
    and the safest action was returned instead.
    """

    first: AugmentedAction
    second: AugmentedAction
    weight: float
    infeasible: bool = False

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise DomainError(f"mixture weight {self.weight} outside [0, 1]")

    @classmethod
    def dirac(cls, action: AugmentedAction, infeasible: bool = False) -> "MixturePolicy":
        return cls(action, action, 0.0, infeasible)

    @property
    def is_dirac(self) -> bool:
        return self.weight in (0.0, 1.0) or self.first == self.second

    def sample(self, rng: numpy.random.Generator) -> AugmentedAction:
        return self.second if rng.random() < self.weight else self.first

    def expectation(self, value: Callable[[AugmentedAction], VectorSignal]) -> VectorSignal:
        """Expected value of `value` under the mixture."""
        v1, v2 = value(self.first), value(self.second)
        w = self.weight
        return VectorSignal((1 - w) * v1[0] + w * v2[0], (1 - w) * v1[1] + w * v2[1])


@dataclass(frozen=True)
class Transition:
    """One observed (s̄, ā, r, c, s̄′, done) record; the next budget is always the allocated one."""

    aug_state: AugmentedState
    aug_action: AugmentedAction
    reward: float
    cost: float
    next_aug_state: AugmentedState
    terminal: bool

    def __post_init__(self):
        if self.next_aug_state.budget != self.aug_action.budget_allocation:
            raise DomainError(
                f"next budget {self.next_aug_state.budget} differs from the allocated budget "
                f"{self.aug_action.budget_allocation}"
            )


class BiQFunction:
    """
    Two-component action-value function (Q_r, Q_c) over augmented state-actions.

    Budgets only enter through the allocation β_a of the augmented action: rewards and dynamics ignore the current
    budget, so implementations are queried with (state, allocation, action) triples. Subclasses implement `predict`
    and `predict_grid`; both must be deterministic.

    Attributes:
        n_actions (int): Number of discrete actions.
    """

    n_actions: int

    def predict(self, states, budgets, actions) -> numpy.ndarray:
        """Return an (N, 2) array of (Q_r, Q_c) for N (state, allocation, action) triples."""
        raise NotImplementedError

    def predict_grid(self, states, budgets) -> numpy.ndarray:
        """Return an (N, n_actions, len(budgets), 2) array: every action and every allocation for each state."""
        raise NotImplementedError

    def evaluate(self, aug_state: AugmentedState, aug_action: AugmentedAction) -> VectorSignal:
        """Value of one augmented state-action pair."""
        out = self.predict(
            numpy.asarray([aug_state.state]), numpy.asarray([aug_action.budget_allocation]), numpy.asarray([aug_action.action])
        )
        return VectorSignal(float(out[0, 0]), float(out[0, 1]))


class BudgetedPolicy:
    """Interface of executable budgeted policies: consume the current budget, emit an action and the next budget."""

    def begin_episode(self, rng: numpy.random.Generator) -> None:
        """Hook called once at the start of every episode (episode-level randomisation)."""

    def act(self, observation, budget: float, rng: numpy.random.Generator) -> AugmentedAction:
        raise NotImplementedError


@dataclass
class BudgetedMdp:
    """
    Finite budgeted MDP (S, A, P, R_r, R_c, γ) with budget interval [budget_min, budget_max].

    Attributes:
        transition (numpy.ndarray): (S, A, S) row-stochastic kernel.
        reward (numpy.ndarray): (S, A) reward table.
        cost (numpy.ndarray): (S, A) cost table.
        gamma (float): Discount factor in [0, 1].
        budget_min (float): Lower end of the budget interval.
        budget_max (float): Upper end of the budget interval.
        terminal (numpy.ndarray): (S,) mask of absorbing states whose continuation value is zero.
    """

    transition: numpy.ndarray
    reward: numpy.ndarray
    cost: numpy.ndarray
    gamma: float
    budget_min: float = 0.0
    budget_max: float = 1.0
    terminal: Optional[numpy.ndarray] = None

    def __post_init__(self):
        self.transition = numpy.asarray(self.transition, dtype=numpy.float64)
        self.reward = numpy.asarray(self.reward, dtype=numpy.float64)
        self.cost = numpy.asarray(self.cost, dtype=numpy.float64)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise DomainError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        n_states, n_actions = self.transition.shape[:2]
        for name in ("reward", "cost"):
            table = getattr(self, name)
            if table.shape != (n_states, n_actions):
                raise DomainError(f"{name} must have shape {(n_states, n_actions)}, got {table.shape}")
            if not numpy.all(numpy.isfinite(table)):
                raise DomainError(f"{name} table must be finite")
        if numpy.any(self.transition < 0) or not numpy.allclose(
            self.transition.sum(axis=-1), 1.0, rtol=0, atol=STOCHASTIC_ATOL
        ):
            raise DomainError("transition rows must be nonnegative and sum to 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.budget_min > self.budget_max:
            raise DomainError(f"empty budget interval [{self.budget_min}, {self.budget_max}]")
        if self.terminal is None:
            self.terminal = numpy.zeros(n_states, dtype=bool)
        self.terminal = numpy.asarray(self.terminal, dtype=bool)
        if self.terminal.shape != (n_states,):
            raise DomainError(f"terminal mask must have shape ({n_states},)")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def budget_space(self) -> Tuple[float, float]:
        return self.budget_min, self.budget_max

    def check_indices(self, state: int, action: Optional[int] = None) -> None:
        if not 0 <= int(state) < self.n_states:
            raise DomainError(f"state index {state} out of range [0, {self.n_states})")
        if action is not None and not 0 <= int(action) < self.n_actions:
            raise DomainError(f"action index {action} out of range [0, {self.n_actions})")

    @classmethod
    def from_dict(cls, data: dict) -> "BudgetedMdp":
        required = {"transition", "reward", "cost", "gamma"}
        missing = required - set(data)
        if missing:
            raise DomainError(f"BMDP description lacks {sorted(missing)}")
        mdp = cls(
            transition=data["transition"],
            reward=data["reward"],
            cost=data["cost"],
            gamma=float(data["gamma"]),
            budget_min=float(data.get("budget_min", 0.0)),
            budget_max=float(data.get("budget_max", 1.0)),
            terminal=data.get("terminal"),
        )
        for key in ("n_states", "n_actions"):
            if key in data and int(data[key]) != getattr(mdp, key):
                raise DomainError(f"{key}={data[key]} disagrees with the table shapes ({getattr(mdp, key)})")
        return mdp

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "BudgetedMdp":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"BMDP file not found: {path}")
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "gamma": self.gamma,
            "budget_min": self.budget_min,
            "budget_max": self.budget_max,
            "terminal": self.terminal.tolist(),
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)
        return path


class GriddedQ(BiQFunction):
    """
    Tabular bi-valued Q-function on a budget grid.

    Q((s, β), (a, β_a)) does not depend on β, so the table is stored as (S, A, G, 2) and `values` exposes the full
    (state, budget, action, allocation) view as a read-only broadcast.

    Attributes:
        table (numpy.ndarray): (S, A, G, 2) array of (Q_r, Q_c).
        grid (BudgetGrid): The budget grid indexing allocations.
    """

    MAGIC = b"BRLGRDQ1"

    def __init__(self, table: numpy.ndarray, grid: BudgetGrid):
        table = numpy.asarray(table, dtype=numpy.float64)
        if table.ndim != 4 or table.shape[2] != len(grid) or table.shape[3] != 2:
            raise DomainError(f"table shape {table.shape} does not match (S, A, {len(grid)}, 2)")
        if not numpy.all(numpy.isfinite(table)):
            raise DomainError("gridded Q-function entries must be finite")
        self.table = table
        self.grid = grid
        self.n_actions = table.shape[1]

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, grid: BudgetGrid) -> "GriddedQ":
        return cls(numpy.zeros((n_states, n_actions, len(grid), 2)), grid)

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def values(self) -> numpy.ndarray:
        s, a, g, _ = self.table.shape
        return numpy.broadcast_to(self.table[:, None], (s, g, a, g, 2))

    def _rows(self, states) -> numpy.ndarray:
        states = numpy.asarray(states)
        if states.ndim == 2 and states.shape[1] > 1:  # one-hot observations
            states = states.argmax(axis=1)
        rows = states.astype(numpy.int64).ravel()
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_states):
            raise DomainError(f"state index out of range [0, {self.n_states})")
        return rows

    def predict(self, states, budgets, actions) -> numpy.ndarray:
        rows = self._rows(states)
        idx, n_off = self.grid.project(budgets)
        if n_off:
            logger.debug(f"{n_off} allocations projected on the grid")
        return self.table[rows, numpy.asarray(actions, dtype=numpy.int64), idx]

    def predict_grid(self, states, budgets) -> numpy.ndarray:
        rows = self._rows(states)
        idx, _ = self.grid.project(budgets)
        return self.table[rows][:, :, idx]

    def sup_distance(self, other: "GriddedQ") -> float:
        return float(numpy.max(numpy.abs(self.table - other.table))) if self.table.size else 0.0

    def save(self, path: Union[str, Path]) -> Path:
        from budgetedrl.utils.files import write_records

        s, a, g, _ = self.table.shape
        return write_records(path, self.MAGIC, [1, s, a, g], numpy.concatenate([self.grid.values, self.table.ravel()]))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GriddedQ":
        from budgetedrl.utils.files import read_records

        header, payload = read_records(path, cls.MAGIC)
        _, s, a, g = (int(h) for h in header)
        return cls(payload[g:].reshape(s, a, g, 2), BudgetGrid(payload[:g]))


@dataclass
class GridPolicy:
    """
    Tabular budgeted policy over (state, budget-grid index): a two-point mixture per cell.

    Allocations are grid indices; `first_*` is drawn with probability 1 - weight and `second_*` with probability
    weight.
    """

    first_action: numpy.ndarray
    first_alloc: numpy.ndarray
    second_action: numpy.ndarray
    second_alloc: numpy.ndarray
    weight: numpy.ndarray
    infeasible: numpy.ndarray
    grid: BudgetGrid

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape

    def mixture(self, state: int, budget_index: int) -> MixturePolicy:
        values = self.grid.values
        first = AugmentedAction(int(self.first_action[state, budget_index]), float(values[self.first_alloc[state, budget_index]]))
        second = AugmentedAction(
            int(self.second_action[state, budget_index]), float(values[self.second_alloc[state, budget_index]])
        )
        return MixturePolicy(first, second, float(self.weight[state, budget_index]), bool(self.infeasible[state, budget_index]))

    @classmethod
    def from_callable(
        cls, n_states: int, grid: BudgetGrid, policy: Callable[[AugmentedState], MixturePolicy]
    ) -> "GridPolicy":
        """Tabulate any policy on (state, grid budget) cells, projecting off-grid allocations to the nearest value."""
        shape = (n_states, len(grid))
        a1, a2 = numpy.zeros(shape, dtype=numpy.int64), numpy.zeros(shape, dtype=numpy.int64)
        b1, b2 = numpy.zeros(shape, dtype=numpy.int64), numpy.zeros(shape, dtype=numpy.int64)
        weight, infeasible = numpy.zeros(shape), numpy.zeros(shape, dtype=bool)
        off_grid = 0
        for s in range(n_states):
            for j, beta in enumerate(grid.values):
                mix = policy(AugmentedState(s, float(beta)))
                idx, n_off = grid.project([mix.first.budget_allocation, mix.second.budget_allocation])
                off_grid += n_off
                a1[s, j], a2[s, j] = mix.first.action, mix.second.action
                b1[s, j], b2[s, j] = idx
                weight[s, j], infeasible[s, j] = mix.weight, mix.infeasible
        if off_grid:
            logger.warning(f"{off_grid} policy allocations were off the budget grid and projected to the nearest value")
        return cls(a1, b1, a2, b2, weight, infeasible, grid)

    @classmethod
    def random(cls, n_states: int, n_actions: int, grid: BudgetGrid, rng: numpy.random.Generator) -> "GridPolicy":
        """A random mixture in every cell; used by tests and diagnostics."""
        shape = (n_states, len(grid))
        return cls(
            rng.integers(n_actions, size=shape),
            rng.integers(len(grid), size=shape),
            rng.integers(n_actions, size=shape),
            rng.integers(len(grid), size=shape),
            rng.random(shape),
            numpy.zeros(shape, dtype=bool),
            grid,
        )


@dataclass
class ConvergenceReport:
    """
    Per-iteration record of an iterative solver.

    Attributes:
        rows (list): (iteration, residual_r, residual_c, infeasibility_count) tuples.
        converged (bool): Whether the tolerance was reached.
    """

    rows: List[Tuple[int, float, float, int]] = field(default_factory=list)
    converged: bool = False

    COLUMNS = ("iteration", "residual_r", "residual_c", "infeasibility_count")

    def append(self, iteration: int, residual_r: float, residual_c: float, infeasibility_count: int = 0) -> None:
        self.rows.append((int(iteration), float(residual_r), float(residual_c), int(infeasibility_count)))

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def residuals(self) -> numpy.ndarray:
        """Sup-norm residual per iteration (max over both channels)."""
        return numpy.asarray([max(r, c) for _, r, c, _ in self.rows])

    def to_frame(self):
        import pandas

        return pandas.DataFrame(self.rows, columns=list(self.COLUMNS))

    def to_csv(self, path: Union[str, Path]) -> Path:
        from budgetedrl.utils.files import write_frame

        return write_frame(self.to_frame(), path)


@dataclass
class TransitionBatch:
    """
    Columnar batch of transitions: the dataset consumed by BFTQ and FTQ(λ).

    Next budgets are not stored: they are the allocated budgets by the Dirac budget dynamics.

    Attributes:
        states (numpy.ndarray): (N, d) states.
        budgets (numpy.ndarray): (N,) budgets β of the augmented states.
        actions (numpy.ndarray): (N,) action indices.
        allocations (numpy.ndarray): (N,) allocated budgets β_a.
        rewards (numpy.ndarray): (N,) rewards.
        costs (numpy.ndarray): (N,) costs.
        next_states (numpy.ndarray): (N, d) next states.
        dones (numpy.ndarray): (N,) episode-end flags.
    """

    states: numpy.ndarray
    budgets: numpy.ndarray
    actions: numpy.ndarray
    allocations: numpy.ndarray
    rewards: numpy.ndarray
    costs: numpy.ndarray
    next_states: numpy.ndarray
    dones: numpy.ndarray

    MAGIC = b"BRLBATC1"

    def __post_init__(self):
        self.states = numpy.asarray(self.states, dtype=numpy.float64)
        self.next_states = numpy.asarray(self.next_states, dtype=numpy.float64)
        if self.states.ndim == 1:
            self.states, self.next_states = self.states[:, None], self.next_states.reshape(-1, 1)
        if self.next_states.shape != self.states.shape:
            raise DomainError(f"next_states shape {self.next_states.shape} differs from states {self.states.shape}")
        self.budgets = numpy.asarray(self.budgets, dtype=numpy.float64)
        self.actions = numpy.asarray(self.actions, dtype=numpy.int64)
        self.allocations = numpy.asarray(self.allocations, dtype=numpy.float64)
        self.rewards = numpy.asarray(self.rewards, dtype=numpy.float64)
        self.costs = numpy.asarray(self.costs, dtype=numpy.float64)
        self.dones = numpy.asarray(self.dones, dtype=bool)
        n = len(self.rewards)
        for name in ("budgets", "actions", "allocations", "costs", "dones"):
            if getattr(self, name).shape != (n,):
                raise DomainError(f"batch column '{name}' must have shape ({n},)")

    def __len__(self):
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def next_budgets(self) -> numpy.ndarray:
        return self.allocations

    @classmethod
    def empty(cls, state_dim: int) -> "TransitionBatch":
        z = numpy.zeros(0)
        return cls(numpy.zeros((0, state_dim)), z, z, z, z, z, numpy.zeros((0, state_dim)), z)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], state_dim: Optional[int] = None) -> "TransitionBatch":
        if not transitions:
            assert state_dim is not None, "state_dim is required for an empty batch"
            return cls.empty(state_dim)
        return cls(
            states=numpy.asarray([numpy.atleast_1d(t.aug_state.state) for t in transitions], dtype=numpy.float64),
            budgets=[t.aug_state.budget for t in transitions],
            actions=[t.aug_action.action for t in transitions],
            allocations=[t.aug_action.budget_allocation for t in transitions],
            rewards=[t.reward for t in transitions],
            costs=[t.cost for t in transitions],
            next_states=numpy.asarray([numpy.atleast_1d(t.next_aug_state.state) for t in transitions], dtype=numpy.float64),
            dones=[t.terminal for t in transitions],
        )

    @classmethod
    def concat(cls, batches: Iterable["TransitionBatch"]) -> "TransitionBatch":
        batches = list(batches)
        assert batches, "nothing to concatenate"
        return cls(*(numpy.concatenate([getattr(b, name) for b in batches]) for name in cls._columns()))

    @staticmethod
    def _columns() -> Tuple[str, ...]:
        return ("states", "budgets", "actions", "allocations", "rewards", "costs", "next_states", "dones")

    def subset(self, index) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, name)[index] for name in self._columns()))

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            allocation = float(self.allocations[i])
            yield Transition(
                AugmentedState(self.states[i], float(self.budgets[i])),
                AugmentedAction(int(self.actions[i]), allocation),
                float(self.rewards[i]),
                float(self.costs[i]),
                AugmentedState(self.next_states[i], allocation),
                bool(self.dones[i]),
            )

    def to_frame(self):
        import pandas

        d = self.state_dim
        columns = {f"s_{k}": self.states[:, k] for k in range(d)}
        columns.update(
            beta=self.budgets, action=self.actions, beta_a=self.allocations, reward=self.rewards, cost=self.costs
        )
        columns.update({f"sp_{k}": self.next_states[:, k] for k in range(d)})
        columns["done"] = self.dones.astype(numpy.int64)
        return pandas.DataFrame(columns)

    @classmethod
    def from_frame(cls, frame) -> "TransitionBatch":
        s_cols = sorted((c for c in frame.columns if c.startswith("s_")), key=lambda c: int(c[2:]))
        sp_cols = sorted((c for c in frame.columns if c.startswith("sp_")), key=lambda c: int(c[3:]))
        missing = {"beta", "action", "beta_a", "reward", "cost", "done"} - set(frame.columns)
        if missing or len(s_cols) != len(sp_cols) or not s_cols:
            raise DomainError(f"malformed batch table (missing {sorted(missing)})")
        return cls(
            frame[s_cols].to_numpy(dtype=numpy.float64),
            frame["beta"].to_numpy(),
            frame["action"].to_numpy(),
            frame["beta_a"].to_numpy(),
            frame["reward"].to_numpy(),
            frame["cost"].to_numpy(),
            frame[sp_cols].to_numpy(dtype=numpy.float64),
            frame["done"].to_numpy() != 0,
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TransitionBatch":
        import pandas

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Batch file not found: {path}")
        return cls.from_frame(pandas.read_csv(path))

    def save(self, path: Union[str, Path]) -> Path:
        """Binary form: columns s, beta, action, beta_a, reward, cost, sp, done as a row-major float64 matrix."""
        from budgetedrl.utils.files import write_records

        matrix = numpy.column_stack(
            [self.states, self.budgets, self.actions, self.allocations, self.rewards, self.costs, self.next_states, self.dones]
        )
        return write_records(path, self.MAGIC, [1, len(self), self.state_dim], matrix)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TransitionBatch":
        from budgetedrl.utils.files import read_records

        header, payload = read_records(path, cls.MAGIC)
        _, n, d = (int(h) for h in header)
        m = payload.reshape(n, 2 * d + 6)
        return cls(m[:, :d], m[:, d], m[:, d + 1], m[:, d + 2], m[:, d + 3], m[:, d + 4], m[:, d + 5 : 2 * d + 5], m[:, -1] != 0)


def augmented_transition_sample(
    mdp: BudgetedMdp, aug_state: AugmentedState, aug_action: AugmentedAction, rng: numpy.random.Generator
) -> AugmentedState:
    """
    Sample the next augmented state: s′ ~ P(·|s, a) and β′ = β_a exactly.

    Raises:
        DomainError: Invalid state or action index, or an allocation outside the budget space.
    """
    mdp.check_indices(aug_state.state, aug_action.action)
    aug_action.validate(mdp.n_actions, mdp.budget_space)
    row = mdp.transition[int(aug_state.state), int(aug_action.action)]
    next_state = min(int(numpy.searchsorted(numpy.cumsum(row), rng.random(), side="right")), mdp.n_states - 1)
    return AugmentedState(next_state, aug_action.budget_allocation)


def discounted_return(trajectory: Iterable[Sequence[float]], gamma: float) -> VectorSignal:
    """
    Discounted return (Σ γ^t r_t, Σ γ^t c_t) of a sequence of (reward, cost) signals, summed in time order.

    Examples:
        >>> discounted_return([(1, 0), (1, 1)], 0.5)
        VectorSignal(reward=1.5, cost=0.5)
    """
    g_r, g_c, discount = 0.0, 0.0, 1.0
    for reward, cost in trajectory:
        g_r += discount * reward
        g_c += discount * cost
        discount *= gamma
    return VectorSignal(g_r, g_c)


def default_max_iters(gamma: float, tol: float) -> int:
    """10·⌈log(1/tol)/log(1/γ)⌉, with 1 when γ = 0 and 10000 when γ = 1."""
    if gamma <= 0:
        return 1
    if gamma >= 1:
        return 10000
    return 10 * math.ceil(math.log(1.0 / tol) / math.log(1.0 / gamma))


def _policy_next_values(q: GriddedQ, policy: GridPolicy) -> numpy.ndarray:
    """Expected q under the policy at every (next state, next budget index): an (S, G, 2) array."""
    rows = numpy.arange(q.n_states)[:, None]
    v1 = q.table[rows, policy.first_action, policy.first_alloc]
    v2 = q.table[rows, policy.second_action, policy.second_alloc]
    w = policy.weight[..., None]
    return (1 - w) * v1 + w * v2


def _backup_from_next_values(mdp: BudgetedMdp, next_values: numpy.ndarray) -> numpy.ndarray:
    """R(s, a) + γ Σ_s′ P(s′|s, a) V(s′, β_a) on the grid, zero continuation from terminal states."""
    continuation = next_values * (~mdp.terminal)[:, None, None]
    future = numpy.einsum("sap,pgk->sagk", mdp.transition, continuation)
    immediate = numpy.stack([mdp.reward, mdp.cost], axis=-1)[:, :, None, :]
    return immediate + mdp.gamma * future


def _as_grid_policy(mdp: BudgetedMdp, policy, grid: BudgetGrid) -> GridPolicy:
    if isinstance(policy, GridPolicy):
        if policy.grid != grid or policy.shape != (mdp.n_states, len(grid)):
            raise DomainError("policy table does not match the BMDP and grid")
        return policy
    return GridPolicy.from_callable(mdp.n_states, grid, policy)


def bellman_expectation_backup(
    mdp: BudgetedMdp, policy: Union[GridPolicy, Callable], q: GriddedQ, grid: Optional[BudgetGrid] = None
) -> GriddedQ:
    """
    One application of the Budgeted Bellman expectation operator T^π on the grid.

    Args:
        mdp (BudgetedMdp): The finite BMDP.
        policy (GridPolicy | Callable): Tabulated policy, or a callable AugmentedState -> MixturePolicy. Allocations
            off the grid are projected to the nearest grid value (logged).
        q (GriddedQ): Current iterate.
        grid (BudgetGrid | None): Budget grid, defaults to `q.grid`.

    Returns:
        (GriddedQ): T^π q.
    """
    grid = q.grid if grid is None else grid
    policy = _as_grid_policy(mdp, policy, grid)
    return GriddedQ(_backup_from_next_values(mdp, _policy_next_values(q, policy)), grid)


def policy_evaluation(
    mdp: BudgetedMdp,
    policy: Union[GridPolicy, Callable],
    grid: BudgetGrid,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
    with_report: bool = False,
):
    """
    Evaluate a budgeted policy by iterating `bellman_expectation_backup` from Q = 0.

    Stops when the sup-norm change falls below `tol`. With γ = 0 a single backup is exact.

    Returns:
        (GriddedQ | Tuple[GriddedQ, ConvergenceReport]): Q^π, and the report when `with_report` is set.

    Raises:
        ConvergenceError: `max_iters` backups did not reach `tol`.
    """
    policy = _as_grid_policy(mdp, policy, grid)
    max_iters = default_max_iters(mdp.gamma, tol) if max_iters is None else max_iters
    q = GriddedQ.zeros(mdp.n_states, mdp.n_actions, grid)
    report = ConvergenceReport()
    for k in range(1, max_iters + 1):
        new = bellman_expectation_backup(mdp, policy, q, grid)
        delta = numpy.abs(new.table - q.table)
        report.append(k, delta[..., 0].max(initial=0.0), delta[..., 1].max(initial=0.0))
        q = new
        if mdp.gamma == 0 or delta.max(initial=0.0) < tol:
            report.converged = True
            break
    else:
        residual = float(report.residuals[-1])
        raise ConvergenceError(
            f"policy evaluation did not reach tol={tol} in {max_iters} iterations (residual {residual:.3e})",
            residual=residual,
            iterations=max_iters,
        )
    logger.debug(f"policy evaluation converged in {report.iterations} iterations")
    return (q, report) if with_report else q


def policy_evaluation_linear(mdp: BudgetedMdp, policy: Union[GridPolicy, Callable], grid: BudgetGrid) -> GriddedQ:
    """
    Exact policy evaluation: solve (I - γ P^π) Q = R on the finite augmented state-action space.

    The augmented space has S·A·G points; keep it small.
    """
    policy = _as_grid_policy(mdp, policy, grid)
    n_s, n_a, n_g = mdp.n_states, mdp.n_actions, len(grid)
    n = n_s * n_a * n_g

    def flat(s, a, j):
        return (s * n_a + a) * n_g + j

    s, a, j, sp = numpy.meshgrid(numpy.arange(n_s), numpy.arange(n_a), numpy.arange(n_g), numpy.arange(n_s), indexing="ij")
    prob = mdp.transition[s, a, sp] * (~mdp.terminal)[sp]
    w = policy.weight[sp, j]
    rows = flat(s, a, j).ravel()
    kernel = numpy.zeros((n, n))
    numpy.add.at(kernel, (rows, flat(sp, policy.first_action[sp, j], policy.first_alloc[sp, j]).ravel()), (prob * (1 - w)).ravel())
    numpy.add.at(kernel, (rows, flat(sp, policy.second_action[sp, j], policy.second_alloc[sp, j]).ravel()), (prob * w).ravel())

    immediate = numpy.stack([mdp.reward, mdp.cost], axis=-1)
    rhs = numpy.broadcast_to(immediate[:, :, None, :], (n_s, n_a, n_g, 2)).reshape(n, 2)
    solution = numpy.linalg.solve(numpy.eye(n) - mdp.gamma * kernel, rhs)
    return GriddedQ(solution.reshape(n_s, n_a, n_g, 2), grid)
