"""
Risk-sensitive batch collection: an ε-mixture of a random budgeted policy and the latest greedy budgeted policy,
with uniform initial budgets and budgets threaded through allocations.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy

from .bmdp import AugmentedAction, AugmentedState, BudgetedPolicy, BudgetGrid, TransitionBatch, discounted_return

import logging
logger = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "steps", "epsilon_at_start", "beta_0", "return_r", "return_c")


@dataclass
class ExplorationConfig:
    """
    Batch collection parameters.

    Attributes:
        total_samples (int): Transitions to collect in total (N).
        minibatches (int): Number of minibatches; the greedy policy is retrained between them.
        epsilon_decay (float): ε_k = max(ε_floor, exp(-decay·k)).
        epsilon_floor (float): Lower bound of ε; 1 means pure random exploration.
        decay_unit (str): What k counts: "step", "episode" or "minibatch".
        budget_sampler (str): Random budgeted action sampler, "uniform" or "dirichlet".
        strategy (str): "risk_sensitive" (budget-respecting random actions) or "risk_neutral" (allocations drawn
            uniformly on the budget interval, ignoring the current budget).
        episodes_per_round (int): Episodes collected concurrently; ε and the greedy policy are fixed within a round.
        workers (int): Worker processes running the episodes of a round.
    """

    total_samples: int = 5000
    minibatches: int = 10
    epsilon_decay: float = 0.001
    epsilon_floor: float = 0.0
    decay_unit: str = "step"
    budget_sampler: str = "uniform"
    strategy: str = "risk_sensitive"
    episodes_per_round: int = 16
    workers: int = 1

    KEYMAP = {"n_samples": "total_samples", "n_minibatch": "minibatches", "decay_epsilon_scheduling": "epsilon_decay"}

    def __post_init__(self):
        if self.total_samples < 1 or self.minibatches < 1 or self.episodes_per_round < 1 or self.workers < 1:
            raise ValueError("total_samples, minibatches, episodes_per_round and workers must be positive")
        if self.epsilon_decay < 0 or not 0.0 <= self.epsilon_floor <= 1.0:
            raise ValueError("epsilon_decay must be nonnegative and epsilon_floor in [0, 1]")
        if self.decay_unit not in ("step", "episode", "minibatch"):
            raise ValueError(f"unknown decay unit '{self.decay_unit}'")
        if self.budget_sampler not in ("uniform", "dirichlet"):
            raise ValueError(f"unknown budget sampler '{self.budget_sampler}'")
        if self.strategy not in ("risk_sensitive", "risk_neutral"):
            raise ValueError(f"unknown exploration strategy '{self.strategy}'")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "ExplorationConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)

    @property
    def minibatch_sizes(self) -> List[int]:
        """Samples per minibatch; the last one absorbs the remainder."""
        size = self.total_samples // self.minibatches
        sizes = [size] * self.minibatches
        sizes[-1] += self.total_samples - size * self.minibatches
        return sizes


def epsilon_schedule(k: int, decay: float, floor: float = 0.0) -> float:
    """ε_k = max(floor, exp(-decay·k))."""
    return max(floor, float(numpy.exp(-decay * k)))


def sample_initial_budget(rng: numpy.random.Generator, budget_space: Tuple[float, float]) -> float:
    """β₀ ~ U(β_min, β_max)."""
    low, high = budget_space
    assert low <= high, f"empty budget interval {budget_space}"
    return float(rng.uniform(low, high)) if high > low else float(low)


def _dirichlet_action(
    aug_state: AugmentedState, n_actions: int, grid: BudgetGrid, rng: numpy.random.Generator, max_tries: int = 100
) -> Optional[AugmentedAction]:
    allocations = numpy.tile(grid.values, n_actions)
    for _ in range(max_tries):
        weights = rng.dirichlet(numpy.ones(allocations.size))
        if weights @ allocations <= aug_state.budget:
            k = int(rng.choice(allocations.size, p=weights))
            return AugmentedAction(k // len(grid), float(allocations[k]))
    return None


def sample_random_budgeted_action(
    aug_state: AugmentedState,
    n_actions: int,
    budget_space: Tuple[float, float],
    rng: numpy.random.Generator,
    sampler: str = "uniform",
    grid: Optional[BudgetGrid] = None,
) -> AugmentedAction:
    """
    Random augmented action whose expected allocation does not exceed the current budget.

    The uniform sampler draws the action uniformly and β_a ~ U[β_min, min(2β - β_min, β_max)], so E[β_a] ≤ β. The
    Dirichlet sampler draws a distribution over A × B̃ uniformly on the simplex, rejecting those with expected
    allocation above β, and falls back to the uniform sampler after 100 rejections.
    """
    if sampler == "dirichlet":
        assert grid is not None, "the dirichlet sampler needs a budget grid"
        action = _dirichlet_action(aug_state, n_actions, grid, rng)
        if action is not None:
            return action
        logger.debug(f"dirichlet sampler fell back to uniform at budget {aug_state.budget}")
    low, high = budget_space
    action = int(rng.integers(n_actions))
    upper = max(low, min(2 * aug_state.budget - low, high))
    return AugmentedAction(action, float(rng.uniform(low, upper)) if upper > low else float(low))


def sample_risk_neutral_action(
    n_actions: int, budget_space: Tuple[float, float], rng: numpy.random.Generator
) -> AugmentedAction:
    """Uniform action with an allocation drawn uniformly on the whole budget interval."""
    low, high = budget_space
    return AugmentedAction(int(rng.integers(n_actions)), float(rng.uniform(low, high)) if high > low else float(low))


@dataclass
class EpisodeRecord:
    rows: List[tuple]
    log: tuple
    error: Optional[str] = None


def _run_episode(
    env_factory: Callable,
    policy: Optional[BudgetedPolicy],
    epsilon: float,
    seed: int,
    index: int,
    budget_space: Tuple[float, float],
    cfg: ExplorationConfig,
    grid: Optional[BudgetGrid],
) -> EpisodeRecord:
    from budgetedrl.envs.base import make_rng

    rng = make_rng(numpy.random.SeedSequence([seed, index]))
    rows, signals, error = [], [], None
    beta = sample_initial_budget(rng, budget_space)
    beta_0 = beta
    try:
        env = env_factory()
        obs, _ = env.reset(seed=int(rng.integers(2**63)))
        if policy is not None:
            policy.begin_episode(rng)
        n_actions = env.n_actions
        while True:
            explore = rng.random() < epsilon or policy is None
            if not explore:
                aug_action = policy.act(obs, beta, rng)
            elif cfg.strategy == "risk_neutral":
                aug_action = sample_risk_neutral_action(n_actions, budget_space, rng)
            else:
                aug_action = sample_random_budgeted_action(
                    AugmentedState(obs, beta), n_actions, budget_space, rng, cfg.budget_sampler, grid
                )
            next_obs, reward, terminated, truncated, info = env.step(aug_action.action)
            done = terminated or truncated
            rows.append((obs, beta, aug_action.action, aug_action.budget_allocation, reward, info["cost"], next_obs, done))
            signals.append((reward, info["cost"]))
            obs, beta = next_obs, aug_action.budget_allocation
            if done:
                break
        gamma = env.gamma
    except Exception as e:  # any fault ends the episode
        error = f"episode {index}: {type(e).__name__}: {e}"
        gamma = 1.0
    g = discounted_return(signals, gamma)
    return EpisodeRecord(rows, (index, len(rows), epsilon, beta_0, g.reward, g.cost), error)


def _rows_to_batch(rows: List[tuple], state_dim: int) -> TransitionBatch:
    if not rows:
        return TransitionBatch.empty(state_dim)
    columns = list(zip(*rows))
    return TransitionBatch(
        numpy.asarray(columns[0], dtype=numpy.float64).reshape(len(rows), -1),
        columns[1], columns[2], columns[3], columns[4], columns[5],
        numpy.asarray(columns[6], dtype=numpy.float64).reshape(len(rows), -1),
        columns[7],
    )


@dataclass
class ExplorationResult:
    """
    Collected batch and its episode log.

    Attributes:
        batch (TransitionBatch): All transitions, in episode order.
        log (pandas.DataFrame): One row per episode (episode, steps, epsilon_at_start, beta_0, return_r, return_c).
        episode_ids (numpy.ndarray): Episode index of every transition.
        policy (BudgetedPolicy | None): Greedy policy trained on the full batch, when training was requested.
        n_trainings (int): Number of training calls.
        error (str | None): Set when an environment fault interrupted collection; the batch is then partial.
    """

    batch: TransitionBatch
    log: object
    episode_ids: numpy.ndarray
    policy: Optional[BudgetedPolicy] = None
    n_trainings: int = 0
    error: Optional[str] = None


def collect_batch(
    env_factory: Callable,
    cfg: ExplorationConfig,
    seed: int,
    budget_space: Tuple[float, float],
    train: Optional[Callable[[TransitionBatch], BudgetedPolicy]] = None,
    grid: Optional[BudgetGrid] = None,
    train_final: bool = False,
) -> ExplorationResult:
    """
    Collect `cfg.total_samples` transitions in `cfg.minibatches` minibatches.

    Episodes start from β₀ ~ U(B). At each step, with probability ε a random budgeted action is taken, otherwise the
    greedy policy's; the next budget is the allocation of the action taken. Between minibatches `train` is called on
    all data collected so far and its policy is used for the next minibatch, unless ε is still 1 for that minibatch.
    Episodes run in rounds of `cfg.episodes_per_round`; each episode draws from its own generator seeded by
    (seed, episode index), so the batch does not depend on the worker count.

    Args:
        env_factory (Callable): Builds a fresh environment; must be picklable when `cfg.workers` > 1.
        cfg (ExplorationConfig): Collection parameters.
        seed (int): Master seed.
        budget_space (Tuple[float, float]): Budget interval B.
        train (Callable | None): TransitionBatch -> greedy BudgetedPolicy. Without it exploration is purely random.
        grid (BudgetGrid | None): Budget grid, required by the Dirichlet sampler.
        train_final (bool): Also train on the complete batch and return that policy.

    Returns:
        (ExplorationResult): Batch, episode log and, on environment faults, the partial batch with an error message.
    """
    import pandas

    state_dim = int(numpy.prod(env_factory().observation_space.shape))
    needs_policy = train is not None and cfg.epsilon_floor < 1.0
    policy, n_trainings, error = None, 0, None
    batches, logs, ids = [], [], []
    episode, k_step, k_episode = 0, 0, 0
    epsilon = epsilon_schedule(0, cfg.epsilon_decay, cfg.epsilon_floor)

    for m, target in enumerate(cfg.minibatch_sizes):
        rows, episode_of_row = [], []
        while len(rows) < target and error is None:
            counter = {"step": k_step, "episode": k_episode, "minibatch": m}[cfg.decay_unit]
            epsilon = epsilon_schedule(counter, cfg.epsilon_decay, cfg.epsilon_floor)
            indices = range(episode, episode + cfg.episodes_per_round)
            args = (epsilon, seed)
            if cfg.workers > 1:
                from joblib import Parallel, delayed

                records = Parallel(n_jobs=cfg.workers)(
                    delayed(_run_episode)(env_factory, policy, *args, i, budget_space, cfg, grid) for i in indices
                )
            else:
                records = [_run_episode(env_factory, policy, *args, i, budget_space, cfg, grid) for i in indices]
            for record in records:
                rows += record.rows
                episode_of_row += [record.log[0]] * len(record.rows)
                logs.append(record.log)
                if record.error is not None:
                    error = record.error
                    break
            episode += cfg.episodes_per_round
            k_episode += cfg.episodes_per_round
            k_step += sum(len(r.rows) for r in records)
        batches.append(_rows_to_batch(rows[:target], state_dim))
        ids += episode_of_row[:target]
        if error is not None:
            logger.error(f"exploration stopped in minibatch {m + 1}: {error}")
            break
        logger.info(f"minibatch {m + 1}/{cfg.minibatches}: {sum(len(b) for b in batches)} samples, epsilon {epsilon:.3f}")
        last = m == cfg.minibatches - 1
        if needs_policy and not last:
            coming = {"step": k_step, "episode": k_episode, "minibatch": m + 1}[cfg.decay_unit]
            if epsilon_schedule(coming, cfg.epsilon_decay, cfg.epsilon_floor) < 1.0:
                policy = train(TransitionBatch.concat(batches))
                n_trainings += 1
            else:
                logger.debug(f"epsilon stays 1 after minibatch {m + 1}, greedy policy not retrained")
        elif needs_policy and train_final:
            policy = train(TransitionBatch.concat(batches))
            n_trainings += 1

    log = pandas.DataFrame(logs, columns=list(LOG_COLUMNS))
    return ExplorationResult(
        TransitionBatch.concat(batches), log, numpy.asarray(ids, dtype=numpy.int64), policy, n_trainings, error
    )
