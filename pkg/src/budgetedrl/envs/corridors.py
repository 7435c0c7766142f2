"""
Corridors: a continuous gridworld with Gaussian action noise and two corridors, a risky one with high rewards and
costs and a safe one with smaller rewards and no cost.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import gymnasium
import numpy

from budgetedrl.solvers.errors import ConfigError

from .base import BudgetedEnv, EnvStep

import logging
logger = logging.getLogger(__name__)

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = numpy.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])
WALL, START = "#", "S"


@dataclass(frozen=True)
class CorridorSignal:
    """Per-corridor reward and cost: paid on entering a cell deeper than the previous one."""

    reward_per_depth: float
    cost_per_depth: float = 0.0
    terminal_cost: float = 0.0


@dataclass
class CorridorsLayout:
    """
    Cell map of the corridors world.

    Attributes:
        cells (numpy.ndarray): (height, width) array of cell characters, row 0 at the bottom. '#' is a wall, 'S' the
            start cell, '.' open floor; letters declared in `corridors` are corridor cells whose depth is their row.
        corridors (Dict[str, CorridorSignal]): Signal of each corridor letter.
        terminal_depth (int): Entering a corridor cell at this depth ends the episode.
    """

    cells: numpy.ndarray
    corridors: Dict[str, CorridorSignal]
    terminal_depth: int = 5

    def __post_init__(self):
        starts = numpy.argwhere(self.cells == START)
        if len(starts) != 1:
            raise ConfigError(f"corridors layout needs exactly one start cell, found {len(starts)}")
        row, col = starts[0]
        self.start_cell = (int(col), int(row))

    @classmethod
    def from_dict(cls, data: dict) -> "CorridorsLayout":
        rows = [str(r) for r in data["rows"]]
        if len({len(r) for r in rows}) != 1:
            raise ConfigError("corridors layout rows must share one width")
        corridors = {k: CorridorSignal(**v) for k, v in data.get("corridors", {}).items()}
        return cls(numpy.array([list(r) for r in rows]), corridors, int(data.get("terminal_depth", 5)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CorridorsLayout":
        from budgetedrl.utils import YAML

        return cls.from_dict(YAML.load(path))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def start(self) -> numpy.ndarray:
        """Centre of the start cell."""
        return numpy.asarray(self.start_cell, dtype=numpy.float64) + 0.5

    def cell(self, position) -> Tuple[int, int]:
        col = min(max(int(numpy.floor(position[0])), 0), self.width - 1)
        row = min(max(int(numpy.floor(position[1])), 0), self.height - 1)
        return col, row

    def corridor_of(self, position) -> Optional[str]:
        """Corridor letter of the cell holding `position`, None outside corridors."""
        col, row = self.cell(position)
        kind = self.cells[row, col]
        return kind if kind in self.corridors else None

    def blocked(self, old: Tuple[int, int], new: Tuple[int, int]) -> bool:
        """A move is blocked when any cell of the rectangle spanned by the old and new cells is a wall."""
        (c0, r0), (c1, r1) = old, new
        block = self.cells[min(r0, r1) : max(r0, r1) + 1, min(c0, c1) : max(c0, c1) + 1]
        return bool(numpy.any(block == WALL))

    def signal(self, old: Tuple[int, int], new: Tuple[int, int]) -> Tuple[float, float, bool]:
        """(reward, cost, terminal) of moving from cell `old` to cell `new`."""
        kind = self.cells[new[1], new[0]]
        if kind not in self.corridors or new[1] <= old[1]:
            return 0.0, 0.0, False
        corridor, depth = self.corridors[kind], new[1]
        terminal = depth >= self.terminal_depth
        cost = corridor.cost_per_depth + (corridor.terminal_cost if terminal else 0.0)
        return corridor.reward_per_depth * depth, cost, terminal


def corridors_step(
    state, action: int, rng: numpy.random.Generator, layout: CorridorsLayout, noise_std=(0.25, 0.25)
) -> EnvStep:
    """
    One corridors transition: unit move plus Gaussian noise, clipped to the map, cancelled if it hits a wall.

    Examples:
        >>> from budgetedrl.utils import CFG_DIR
        >>> from budgetedrl.envs.base import make_rng
        >>> layout = CorridorsLayout.load(CFG_DIR / "corridors_layout.yaml")
        >>> corridors_step((1.0, 1.0), RIGHT, make_rng(0), layout, noise_std=(0.0, 0.0)).next_state
        array([2., 1.])
    """
    position = numpy.asarray(state, dtype=numpy.float64)
    target = position + MOVES[action] + rng.normal(size=2) * numpy.asarray(noise_std, dtype=numpy.float64)
    target = numpy.clip(target, 0.0, [layout.width, layout.height])
    old, new = layout.cell(position), layout.cell(target)
    if layout.blocked(old, new):
        target, new = position.copy(), old
    reward, cost, terminal = layout.signal(old, new)
    return EnvStep(target, reward, cost, terminal)


@dataclass
class CorridorsConfig:
    """Corridors parameters; the layout file fixes the map size."""

    width: int = 7
    height: int = 6
    action_noise_std: Tuple[float, float] = (0.25, 0.25)
    horizon: int = 9
    gamma: float = 1.0
    layout: str = "corridors_layout.yaml"

    KEYMAP = {"noise_std": "action_noise_std", "episode_duration": "horizon"}

    def __post_init__(self):
        self.action_noise_std = tuple(float(s) for s in self.action_noise_std)
        if len(self.action_noise_std) != 2 or min(self.action_noise_std) < 0:
            raise ValueError(f"action_noise_std must be two nonnegative values, got {self.action_noise_std}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "CorridorsConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)

    def load_layout(self) -> CorridorsLayout:
        from budgetedrl.utils import CFG_DIR

        path = Path(self.layout)
        path = path if path.is_absolute() or path.exists() else CFG_DIR / path
        layout = CorridorsLayout.load(path)
        if (layout.width, layout.height) != (self.width, self.height):
            raise ConfigError(f"layout {path} is {layout.width}x{layout.height}, expected {self.width}x{self.height}")
        return layout


class CorridorsEnv(BudgetedEnv):
    """
    Corridors environment: observations are (x, y) positions, actions are up, down, left, right.

    Args:
        config (CorridorsConfig | None): Parameters, defaults to the 7x6 map with noise (0.25, 0.25) and horizon 9.
        layout (CorridorsLayout | None): Map overriding the config's layout file.
    """

    def __init__(self, config: Optional[CorridorsConfig] = None, layout: Optional[CorridorsLayout] = None):
        super().__init__()
        self.config = config or CorridorsConfig()
        self.layout = layout if layout is not None else self.config.load_layout()
        self.horizon, self.gamma = self.config.horizon, self.config.gamma
        self.action_space = gymnasium.spaces.Discrete(len(MOVES))
        self.observation_space = gymnasium.spaces.Box(
            0.0, numpy.array([self.layout.width, self.layout.height], dtype=numpy.float64), dtype=numpy.float64
        )
        self.position = self.layout.start

    def _reset_state(self) -> numpy.ndarray:
        self.position = self.layout.start
        return self.position.copy()

    def _transition(self, action: int) -> EnvStep:
        out = corridors_step(self.position, action, self.rng, self.layout, self.config.action_noise_std)
        self.position = out.next_state
        return EnvStep(out.next_state.copy(), out.reward, out.cost, out.done)
