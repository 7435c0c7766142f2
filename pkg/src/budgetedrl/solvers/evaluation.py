"""Policy evaluation by rollouts, and aggregation of per-seed results into reward-cost trade-off records."""
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy

from .bmdp import BudgetedPolicy
from .errors import DomainError

import logging
logger = logging.getLogger(__name__)

TRADEOFF_COLUMNS = ("algorithm", "beta", "mean_gr", "ci95_gr", "mean_gc", "ci95_gc", "n_seeds", "n_trajs")


@dataclass
class EvaluationResult:
    """
    Returns of a policy evaluated from one initial budget.

    Attributes:
        beta (float): Initial budget.
        returns (numpy.ndarray): (n, 2) per-trajectory (G_r, G_c).
        error (str | None): Set when an environment fault cut the evaluation short.
    """

    beta: float
    returns: numpy.ndarray
    error: Optional[str] = None

    @property
    def n_trajs(self) -> int:
        return len(self.returns)

    @property
    def mean_return_r(self) -> float:
        return float(self.returns[:, 0].mean()) if self.n_trajs else float("nan")

    @property
    def mean_return_c(self) -> float:
        return float(self.returns[:, 1].mean()) if self.n_trajs else float("nan")

    def standard_errors(self) -> numpy.ndarray:
        """Standard errors of the two means (0 for a single trajectory)."""
        if self.n_trajs < 2:
            return numpy.zeros(2)
        return self.returns.std(axis=0, ddof=1) / numpy.sqrt(self.n_trajs)


def _rollouts(env_factory: Callable, policy: BudgetedPolicy, beta: float, seed: int, indices, record: bool):
    from budgetedrl.envs.base import make_rng

    env = env_factory()
    returns, steps, error = [], [], None
    for index in indices:
        rng = make_rng(numpy.random.SeedSequence([seed, index]))
        try:
            obs, _ = env.reset(seed=int(rng.integers(2**63)))
            policy.begin_episode(rng)
            budget, g_r, g_c, discount, t = beta, 0.0, 0.0, 1.0, 0
            while True:
                aug_action = policy.act(obs, budget, rng)
                next_obs, reward, terminated, truncated, info = env.step(aug_action.action)
                g_r += discount * reward
                g_c += discount * info["cost"]
                if record:
                    row = {"trajectory": int(index), "t": t, "beta": budget, "action": int(aug_action.action),
                           "beta_a": aug_action.budget_allocation, "reward": reward, "cost": info["cost"],
                           "state": numpy.asarray(obs).tolist()}
                    if hasattr(env, "describe"):
                        row.update(env.describe(aug_action.action))
                    steps.append(row)
                obs, budget, discount, t = next_obs, aug_action.budget_allocation, discount * env.gamma, t + 1
                if terminated or truncated:
                    break
        except Exception as e:  # any fault ends the evaluation
            error = f"trajectory {index}: {type(e).__name__}: {e}"
            break
        returns.append((g_r, g_c))
    return returns, steps, error


def evaluate_policy(
    policy: BudgetedPolicy,
    env_factory: Callable,
    beta: float,
    n_traj: int,
    seed: int,
    workers: int = 1,
    transcript_path: Optional[Union[str, Path]] = None,
) -> EvaluationResult:
    """
    Roll a budgeted policy out from β₀ = `beta`, threading the budget through allocations.

    Returns are discounted with the environment's γ. Trajectory i draws from a generator seeded by (seed, i), so
    results do not depend on `workers`.

    Args:
        policy (BudgetedPolicy): Policy to evaluate; `begin_episode` is called before every trajectory.
        env_factory (Callable): Builds a fresh environment.
        beta (float): Initial budget.
        n_traj (int): Number of trajectories, at least 1.
        seed (int): Evaluation seed.
        workers (int): Worker processes.
        transcript_path (str | Path | None): Write every step as one JSON line there.

    Returns:
        (EvaluationResult): Per-trajectory returns; partial with `error` set on an environment fault.
    """
    if n_traj < 1:
        raise DomainError(f"n_traj must be at least 1, got {n_traj}")
    record = transcript_path is not None
    if workers > 1:
        from joblib import Parallel, delayed

        chunks = [c for c in numpy.array_split(numpy.arange(n_traj), workers) if c.size]
        parts = Parallel(n_jobs=workers)(delayed(_rollouts)(env_factory, policy, beta, seed, c, record) for c in chunks)
    else:
        parts = [_rollouts(env_factory, policy, beta, seed, range(n_traj), record)]

    returns, steps, error = [], [], None
    for part_returns, part_steps, part_error in parts:
        returns += part_returns
        steps += part_steps
        if part_error is not None:
            error = part_error
            break
    if record:
        path = Path(transcript_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for row in steps:
                f.write(json.dumps(row) + "\n")
    if error is not None:
        logger.error(f"evaluation at beta={beta} stopped: {error}")
    return EvaluationResult(float(beta), numpy.asarray(returns, dtype=numpy.float64).reshape(-1, 2), error)


@dataclass
class TradeoffRecord:
    """Mean and 95% confidence half-width over seeds of the per-seed mean returns at one budget."""

    algorithm: str
    beta: float
    mean_gr: float
    ci95_gr: float
    mean_gc: float
    ci95_gc: float
    n_seeds: int
    n_trajs: int


def confidence_halfwidth(values: Sequence[float], level: float = 0.95) -> float:
    """Student-t confidence half-width of the mean; 0 for a single value."""
    from scipy import stats

    values = numpy.asarray(values, dtype=numpy.float64)
    if values.size < 2:
        return 0.0
    quantile = stats.t.ppf(0.5 + level / 2, values.size - 1)
    return float(quantile * values.std(ddof=1) / numpy.sqrt(values.size))


def aggregate_tradeoff(algorithm: str, results_per_seed: Sequence[EvaluationResult]) -> TradeoffRecord:
    """
    Aggregate the evaluations of one budget across seeds.

    Examples:
        >>> r = EvaluationResult(0.5, numpy.array([[1.0, 0.2]]))
        >>> aggregate_tradeoff("bftq", [r]).ci95_gr
        0.0
    """
    if not results_per_seed:
        raise DomainError("nothing to aggregate")
    betas = {r.beta for r in results_per_seed}
    assert len(betas) == 1, f"results from different budgets {sorted(betas)}"
    means_r = [r.mean_return_r for r in results_per_seed]
    means_c = [r.mean_return_c for r in results_per_seed]
    return TradeoffRecord(
        algorithm,
        results_per_seed[0].beta,
        float(numpy.mean(means_r)),
        confidence_halfwidth(means_r),
        float(numpy.mean(means_c)),
        confidence_halfwidth(means_c),
        len(results_per_seed),
        min(r.n_trajs for r in results_per_seed),
    )


def tradeoff_frame(records: Sequence[TradeoffRecord]):
    import pandas

    return pandas.DataFrame([asdict(r) for r in records], columns=list(TRADEOFF_COLUMNS))


def tradeoff_to_csv(records: Sequence[TradeoffRecord], path: Union[str, Path]) -> Path:
    from budgetedrl.utils.files import write_frame

    return write_frame(tradeoff_frame(records), path)


def evaluate_budgets(
    policy: BudgetedPolicy, env_factory: Callable, betas: Sequence[float], n_traj: int, seed: int, workers: int = 1
) -> List[EvaluationResult]:
    """`evaluate_policy` for every budget of `betas`, with a distinct derived seed per budget."""
    results = []
    for j, beta in enumerate(betas):
        sub_seed = int(numpy.random.SeedSequence([seed, j]).generate_state(1)[0])
        results.append(evaluate_policy(policy, env_factory, beta, n_traj, sub_seed, workers))
        logger.info(
            f"beta={beta:.3f}: G_r={results[-1].mean_return_r:.4f}, G_c={results[-1].mean_return_c:.4f} "
            f"over {results[-1].n_trajs} trajectories"
        )
    return results
