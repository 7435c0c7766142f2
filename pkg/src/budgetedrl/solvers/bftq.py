"""
Budgeted Fitted-Q: targets from the sampled optimality operator with π_hull over the budget grid, then regression.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy

from .bmdp import AugmentedAction, BiQFunction, BudgetedPolicy, BudgetGrid, MixturePolicy, TransitionBatch
from .errors import DomainError, RegressorDivergenceError
from .hull import QPoint, enumerate_actions, frontier_to_csv, hull_mixture, hull_mixtures, top_frontier
from .regressors import RegressorSpec, make_regressor

import logging
logger = logging.getLogger(__name__)


@dataclass
class BftqConfig:
    """
    BFTQ parameters.

    Attributes:
        grid (BudgetGrid): Budget grid B̃ (`budget_grid: [min, step, max]` in configuration files).
        gamma (float): Discount factor.
        ftq_epochs (int): Outer fitted-Q iterations.
        regressor (RegressorSpec): Regressor hyper-parameters.
        workers (int): Worker processes for the hull stage of target computation.
        convergence_tol (float | None): Stop early once the sup-norm target change falls below it; None disables.
        target_clip (tuple | None): Optional (low, high) clip applied to both target channels.
        cold_start (bool): Re-initialise the regressor before every fit instead of warm-starting.
        inference_chunk (int): Next states per batched inference pass.
        seed (int): Regressor initialisation seed.
    """

    grid: BudgetGrid = field(default_factory=lambda: BudgetGrid.uniform(0.0, 0.01, 1.0))
    gamma: float = 1.0
    ftq_epochs: int = 12
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    workers: int = 1
    convergence_tol: Optional[float] = None
    target_clip: Optional[Tuple[float, float]] = None
    cold_start: bool = False
    inference_chunk: int = 4096
    seed: int = 0

    KEYMAP = {"budget_grid": "grid", "epoch_ftq": "ftq_epochs"}

    @staticmethod
    def _convert(name, value):
        if name == "grid":
            return BudgetGrid.from_config(value)
        if name == "regressor" and not isinstance(value, RegressorSpec):
            return RegressorSpec.from_dict(value)
        if name == "target_clip" and value is not None:
            return tuple(float(v) for v in value)
        return value

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.ftq_epochs < 1 or self.workers < 1 or self.inference_chunk < 1:
            raise ValueError("ftq_epochs, workers and inference_chunk must be at least 1")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "BftqConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)


@dataclass
class BftqReport:
    """Per-iteration record of a fitted-Q run: sup-norm target change, final fit loss and infeasible targets."""

    rows: List[Tuple[int, float, float, int]] = field(default_factory=list)
    converged: bool = False

    COLUMNS = ("iteration", "target_change", "fit_loss", "infeasibility_count")

    def append(self, iteration: int, target_change: float, fit_loss: float, infeasibility_count: int = 0) -> None:
        self.rows.append((int(iteration), float(target_change), float(fit_loss), int(infeasibility_count)))

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def to_frame(self):
        import pandas

        return pandas.DataFrame(self.rows, columns=list(self.COLUMNS))

    def to_csv(self, path: Union[str, Path]) -> Path:
        from budgetedrl.utils.files import write_frame

        return write_frame(self.to_frame(), path)


def _hull_continuations(values: numpy.ndarray, betas: numpy.ndarray) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    Expected (q_r, q_c) of π_hull at each row's budget, for (n, A, G, 2) candidate values.

    Rows with identical candidate sets (transitions into the same next state) share one frontier, solved for all
    their budgets in a single `hull_mixtures` call.
    """
    n = len(betas)
    out = numpy.zeros((n, 2))
    infeasible = numpy.zeros(n, dtype=bool)
    flat = values.reshape(n, -1, 2)
    _, group = numpy.unique(flat.reshape(n, -1), axis=0, return_inverse=True)
    group = group.ravel()
    for g in range(group.max() + 1):
        rows = numpy.flatnonzero(group == g)
        costs, rewards = flat[rows[0], :, 1], flat[rows[0], :, 0]
        first, second, weight, flag = hull_mixtures(costs, rewards, betas[rows])
        out[rows, 0] = (1 - weight) * rewards[first] + weight * rewards[second]
        out[rows, 1] = (1 - weight) * costs[first] + weight * costs[second]
        infeasible[rows] = flag
    return out, infeasible


def _targets(batch: TransitionBatch, q: BiQFunction, cfg: BftqConfig) -> Tuple[numpy.ndarray, int]:
    targets = numpy.column_stack([batch.rewards, batch.costs])
    live = numpy.flatnonzero(~batch.dones) if cfg.gamma > 0 else numpy.zeros(0, dtype=numpy.int64)
    n_infeasible = 0
    if live.size:
        betas = cfg.grid.snap(batch.allocations[live])
        betas = numpy.atleast_1d(betas)
        # stage 1: batched inference on every (s′, a, β̃)
        values = numpy.concatenate(
            [
                q.predict_grid(batch.next_states[live[start : start + cfg.inference_chunk]], cfg.grid.values)
                for start in range(0, live.size, cfg.inference_chunk)
            ]
        )
        # stage 2: hull per transition, split among workers
        if cfg.workers > 1 and live.size > 1:
            from joblib import Parallel, delayed

            chunks = [c for c in numpy.array_split(numpy.arange(live.size), cfg.workers) if c.size]
            parts = Parallel(n_jobs=cfg.workers)(delayed(_hull_continuations)(values[c], betas[c]) for c in chunks)
            continuation = numpy.concatenate([p[0] for p in parts])
            infeasible = numpy.concatenate([p[1] for p in parts])
        else:
            continuation, infeasible = _hull_continuations(values, betas)
        targets[live] = targets[live] + cfg.gamma * continuation
        n_infeasible = int(infeasible.sum())
    if cfg.target_clip is not None:
        targets = numpy.clip(targets, *cfg.target_clip)
    return targets, n_infeasible


def compute_targets(batch: TransitionBatch, q: BiQFunction, cfg: BftqConfig) -> numpy.ndarray:
    """
    Regression targets Y = (r, c) + γ(1 - done) E_{ā′ ~ π_hull(s′, β_a; q)} q(s′, ā′) for every transition.

    Args:
        batch (TransitionBatch): Transitions; allocations are snapped to the grid before the hull lookup.
        q (BiQFunction): Current Q-function.
        cfg (BftqConfig): Grid, discount and worker count.

    Returns:
        (numpy.ndarray): (N, 2) targets in batch order, identical for every worker count.
    """
    if len(batch) == 0:
        raise DomainError("cannot compute targets on an empty batch")
    targets, n_infeasible = _targets(batch, q, cfg)
    if n_infeasible:
        logger.debug(f"{n_infeasible} targets used an infeasible next budget")
    return targets


def bftq_train(
    batch: TransitionBatch,
    n_actions: int,
    cfg: BftqConfig,
    rng: Optional[numpy.random.Generator] = None,
    regressor: Optional[BiQFunction] = None,
) -> Tuple[BiQFunction, BftqReport]:
    """
    Budgeted Fitted-Q from Q₀ = 0: alternate `compute_targets` and a regression fit for `cfg.ftq_epochs` iterations.

    Args:
        batch (TransitionBatch): Training transitions.
        n_actions (int): Number of discrete actions.
        cfg (BftqConfig): Algorithm parameters.
        rng (numpy.random.Generator | None): Source of regression shuffling seeds.
        regressor (BiQFunction | None): Regressor to warm-start from; built from `cfg.regressor` when omitted.

    Returns:
        (Tuple[BiQFunction, BftqReport]): The fitted Q-function and the per-iteration report.

    Raises:
        RegressorDivergenceError: A fit diverged; its `iteration` is the outer iteration index.
    """
    if len(batch) == 0:
        raise DomainError("cannot train on an empty batch")
    rng = numpy.random.Generator(numpy.random.Philox(cfg.seed)) if rng is None else rng
    if regressor is None:
        regressor = make_regressor(cfg.regressor, batch.state_dim, n_actions, cfg.grid, n_signals=2, seed=cfg.seed)
    report = BftqReport()
    previous = numpy.zeros((len(batch), 2))
    for k in range(1, cfg.ftq_epochs + 1):
        if k == 1:
            targets, n_infeasible = numpy.column_stack([batch.rewards, batch.costs]), 0
            if cfg.target_clip is not None:
                targets = numpy.clip(targets, *cfg.target_clip)
        else:
            targets, n_infeasible = _targets(batch, regressor, cfg)
        change = float(numpy.abs(targets - previous).max())
        if cfg.cold_start:
            regressor.reset()
        try:
            trace = regressor.fit(batch.states, batch.allocations, batch.actions, targets, rng)
        except RegressorDivergenceError as e:
            e.iteration = k
            raise
        report.append(k, change, trace[-1], n_infeasible)
        logger.info(
            f"BFTQ iteration {k}/{cfg.ftq_epochs}: target change {change:.4e}, fit loss {trace[-1]:.4e}"
            + (f", {n_infeasible} infeasible targets" if n_infeasible else "")
        )
        previous = targets
        if cfg.convergence_tol is not None and k > 1 and change < cfg.convergence_tol:
            report.converged = True
            break
    return regressor, report


class HullPolicy(BudgetedPolicy):
    """
    Executable π_hull(·; q): snap β to the grid, evaluate q on A × B̃ in one pass, sample the hull mixture.

    Attributes:
        q (BiQFunction): Q-function the policy is greedy with respect to.
        grid (BudgetGrid): Budget grid.
        n_infeasible (int): Decisions taken at a budget below the minimal achievable cost.
        debug_dir (Path | None): When set, every decision's frontier is dumped there as CSV.
    """

    def __init__(self, q: BiQFunction, grid: BudgetGrid, debug_dir: Optional[Union[str, Path]] = None):
        self.q, self.grid = q, grid
        self.actions = enumerate_actions(q.n_actions, grid)
        self.n_infeasible = 0
        self.n_decisions = 0
        self.debug_dir = None if debug_dir is None else Path(debug_dir)

    def mixture(self, observation, budget: float) -> MixturePolicy:
        beta = self.grid.snap(budget)
        values = self.q.predict_grid(numpy.asarray([observation]), self.grid.values)[0]
        costs, rewards = values[..., 1].ravel(), values[..., 0].ravel()
        choice = hull_mixture(costs, rewards, beta)
        self.n_decisions += 1
        self.n_infeasible += choice.infeasible
        if self.debug_dir is not None:
            points = [QPoint(c, r, a) for c, r, a in zip(costs, rewards, self.actions)]
            frontier_to_csv(top_frontier(points), self.debug_dir / f"frontier_{self.n_decisions:06d}.csv")
        if choice.first == choice.second:
            return MixturePolicy.dirac(self.actions[choice.first], choice.infeasible)
        return MixturePolicy(self.actions[choice.first], self.actions[choice.second], choice.weight, choice.infeasible)

    def act(self, observation, budget: float, rng: numpy.random.Generator) -> AugmentedAction:
        return self.mixture(observation, budget).sample(rng)


def policy_from_q(q: BiQFunction, cfg: BftqConfig, debug_dir: Optional[Union[str, Path]] = None) -> HullPolicy:
    """The executable greedy budgeted policy of a trained Q-function."""
    return HullPolicy(q, cfg.grid, debug_dir)
