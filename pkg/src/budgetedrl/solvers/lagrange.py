"""
FTQ(λ) baseline: scalar fitted-Q on the penalised signal r - λc over a grid of multipliers, and the calibration
line search that mixes the two policies whose mean costs flank a target budget.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy

from .bftq import BftqReport
from .bmdp import AugmentedAction, BudgetedMdp, BudgetedPolicy, ConvergenceReport, TransitionBatch, default_max_iters
from .errors import ConvergenceError, DomainError, RegressorDivergenceError
from .regressors import RegressorSpec, make_regressor

import logging
logger = logging.getLogger(__name__)


def lambda_grid(lambda_min: float, lambda_max: float, n: int = 10, include_zero: bool = True) -> numpy.ndarray:
    """
    Geometric grid of penalty multipliers, optionally starting at 0 (plain reward maximisation).

    Examples:
        >>> lambda_grid(1.0, 100.0, 3)
        array([  0.,   1., 100.])
    """
    assert 0 < lambda_min <= lambda_max, f"invalid multiplier range [{lambda_min}, {lambda_max}]"
    assert n >= 1, "the multiplier grid needs at least one value"
    if include_zero:
        if n == 1:
            return numpy.zeros(1)
        return numpy.concatenate([[0.0], numpy.geomspace(lambda_min, lambda_max, n - 1)])
    return numpy.geomspace(lambda_min, lambda_max, n)


@dataclass
class LagrangeConfig:
    """
    FTQ(λ) parameters.

    Attributes:
        lambdas (list | None): Explicit multipliers; when None a geometric grid is built from the bounds below.
        lambda_min (float): Smallest positive multiplier.
        lambda_max (float): Largest multiplier.
        n_lambdas (int): Number of multipliers.
        include_zero (bool): Put λ = 0 at the start of the geometric grid.
        gamma (float): Discount factor.
        ftq_epochs (int): Fitted-Q iterations per multiplier.
        regressor (RegressorSpec): Regressor hyper-parameters (the budget encoder is unused).
        n_rollouts (int): Calibration rollouts per multiplier.
        deviation_margin (float): k in the conservative calibration mean + k·std; 0 disables it.
        workers (int): Worker processes, one training or calibration per multiplier.
        seed (int): Regressor initialisation seed.
    """

    lambdas: Optional[List[float]] = None
    lambda_min: float = 0.01
    lambda_max: float = 100.0
    n_lambdas: int = 10
    include_zero: bool = True
    gamma: float = 1.0
    ftq_epochs: int = 12
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    n_rollouts: int = 1000
    deviation_margin: float = 0.0
    workers: int = 1
    seed: int = 0

    KEYMAP = {"epoch_ftq": "ftq_epochs", "n_rollouts_calibration": "n_rollouts"}

    @staticmethod
    def _convert(name, value):
        if name == "regressor" and not isinstance(value, RegressorSpec):
            return RegressorSpec.from_dict(value)
        return value

    def __post_init__(self):
        if self.lambdas is not None:
            self.lambdas = [float(v) for v in self.lambdas]
            if not self.lambdas or min(self.lambdas) < 0:
                raise ValueError("lambdas must be a nonempty list of nonnegative values")
        if self.ftq_epochs < 1 or self.workers < 1:
            raise ValueError("ftq_epochs and workers must be at least 1")
        if self.deviation_margin < 0:
            raise ValueError("deviation_margin must be nonnegative")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "LagrangeConfig":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping, **overrides)

    @property
    def grid(self) -> numpy.ndarray:
        """Sorted multipliers to train."""
        if self.lambdas is not None:
            return numpy.sort(numpy.asarray(self.lambdas, dtype=numpy.float64))
        return lambda_grid(self.lambda_min, self.lambda_max, self.n_lambdas, self.include_zero)


def ftq_train(
    batch: TransitionBatch,
    n_actions: int,
    lam: float,
    cfg: LagrangeConfig,
    rng: Optional[numpy.random.Generator] = None,
    regressor=None,
):
    """
    Fitted-Q on the scalar signal r - λc with the max-over-actions backup.

    Args:
        batch (TransitionBatch): Training transitions; budgets and allocations are ignored.
        n_actions (int): Number of discrete actions.
        lam (float): Penalty multiplier λ ≥ 0.
        cfg (LagrangeConfig): Discount, iteration count and regressor.
        rng (numpy.random.Generator | None): Source of regression shuffling seeds.
        regressor (optional): Budget-free scalar regressor to warm-start from.

    Returns:
        (tuple): The fitted scalar Q-function (with `predict_actions`) and a `BftqReport`.

    Raises:
        RegressorDivergenceError: A fit diverged; its `iteration` is the outer iteration index.
    """
    if len(batch) == 0:
        raise DomainError("cannot train on an empty batch")
    if lam < 0:
        raise DomainError(f"the penalty multiplier must be nonnegative, got {lam}")
    rng = numpy.random.Generator(numpy.random.Philox(cfg.seed)) if rng is None else rng
    if regressor is None:
        regressor = make_regressor(cfg.regressor, batch.state_dim, n_actions, grid=None, n_signals=1, seed=cfg.seed)
    signal = batch.rewards - lam * batch.costs
    report = BftqReport()
    previous = numpy.zeros(len(batch))
    for k in range(1, cfg.ftq_epochs + 1):
        targets = signal.copy()
        if k > 1:
            live = ~batch.dones
            if live.any():
                targets[live] += cfg.gamma * regressor.predict_actions(batch.next_states[live]).max(axis=1)
        change = float(numpy.abs(targets - previous).max())
        try:
            trace = regressor.fit(batch.states, None, batch.actions, targets[:, None], rng)
        except RegressorDivergenceError as e:
            e.iteration = k
            raise
        report.append(k, change, trace[-1])
        logger.debug(f"FTQ(lambda={lam:g}) iteration {k}: target change {change:.4e}, fit loss {trace[-1]:.4e}")
        previous = targets
    logger.info(f"FTQ(lambda={lam:g}) trained, last fit loss {report.rows[-1][2]:.4e}")
    return regressor, report


def _train_one(batch, n_actions, lam, cfg, seed):
    rng = numpy.random.Generator(numpy.random.Philox(seed))
    return ftq_train(batch, n_actions, lam, cfg, rng)


def train_lambda_policies(batch: TransitionBatch, n_actions: int, cfg: LagrangeConfig, seed: int = 0) -> List[tuple]:
    """
    Train one FTQ(λ) per multiplier of `cfg.grid`, concurrently when `cfg.workers` > 1.

    Returns:
        (List[tuple]): (λ, scalar Q-function, report) per multiplier, sorted by λ.
    """
    lambdas = cfg.grid
    seeds = [int(numpy.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(len(lambdas))]
    if cfg.workers > 1:
        from joblib import Parallel, delayed

        fitted = Parallel(n_jobs=cfg.workers)(
            delayed(_train_one)(batch, n_actions, lam, cfg, s) for lam, s in zip(lambdas, seeds)
        )
    else:
        fitted = [_train_one(batch, n_actions, lam, cfg, s) for lam, s in zip(lambdas, seeds)]
    return [(float(lam), q, report) for lam, (q, report) in zip(lambdas, fitted)]


class LagrangianPolicy(BudgetedPolicy):
    """
    Greedy policy of a scalar penalised Q-function: argmax over actions, budget passed through unchanged.

    `q` is either a regressor with `predict_actions` or an (S, A) table indexed by one-hot (or index) observations.
    """

    def __init__(self, q, lam: float = 0.0):
        self.q, self.lam = q, lam

    def action_values(self, observation) -> numpy.ndarray:
        if isinstance(self.q, numpy.ndarray):
            obs = numpy.asarray(observation)
            state = int(numpy.argmax(obs)) if obs.size > 1 else int(obs.reshape(-1)[0])
            return self.q[state]
        return self.q.predict_actions(numpy.asarray([observation], dtype=numpy.float64))[0]

    def act(self, observation, budget: float, rng: numpy.random.Generator) -> AugmentedAction:
        return AugmentedAction(int(numpy.argmax(self.action_values(observation))), float(budget))


class CalibratedMixture(BudgetedPolicy):
    """
    Episode-level mixture of two deterministic policies: `second` is followed for a whole episode with probability
    `weight`, `first` otherwise.
    """

    def __init__(self, first: BudgetedPolicy, second: BudgetedPolicy, weight: float, infeasible: bool = False):
        if not 0.0 <= weight <= 1.0:
            raise DomainError(f"mixture weight {weight} outside [0, 1]")
        self.first, self.second, self.weight, self.infeasible = first, second, weight, infeasible
        self.current = first

    def begin_episode(self, rng: numpy.random.Generator) -> None:
        self.current = self.second if rng.random() < self.weight else self.first
        self.current.begin_episode(rng)

    def act(self, observation, budget: float, rng: numpy.random.Generator) -> AugmentedAction:
        return self.current.act(observation, budget, rng)


def lagrangian_value_iteration(
    mdp: BudgetedMdp, lam: float, tol: float = 1e-10, max_iters: Optional[int] = None, strict: bool = False
) -> Tuple[numpy.ndarray, ConvergenceReport]:
    """
    Classical value iteration on r - λc from Q₀ = 0 for a finite BMDP.

    Args:
        mdp (BudgetedMdp): Finite BMDP; budgets are ignored.
        lam (float): Penalty multiplier.
        tol (float): Sup-norm residual tolerance.
        max_iters (int | None): Iteration cap, defaults to `default_max_iters(γ, tol)`.
        strict (bool): Raise `ConvergenceError` instead of warning when the cap is reached.

    Returns:
        (Tuple[numpy.ndarray, ConvergenceReport]): (S, A) scalar action-values and per-iteration residuals.
    """
    max_iters = default_max_iters(mdp.gamma, tol) if max_iters is None else max_iters
    signal = mdp.reward - lam * mdp.cost
    live = (~mdp.terminal).astype(numpy.float64)
    q = numpy.zeros_like(signal)
    report = ConvergenceReport()
    for k in range(1, max_iters + 1):
        new = signal + mdp.gamma * mdp.transition @ (live * q.max(axis=1))
        residual = float(numpy.abs(new - q).max())
        report.append(k, residual, 0.0)
        q = new
        if mdp.gamma == 0 or residual < tol:
            report.converged = True
            break
    if not report.converged:
        if strict:
            raise ConvergenceError(f"value iteration for lambda={lam:g} did not converge", report.residuals[-1], max_iters)
        logger.warning(f"value iteration for lambda={lam:g} stopped at residual {report.residuals[-1]:.3e}")
    return q, report


@dataclass
class CalibrationCurve:
    """
    Estimated mean cost (and its spread) and mean reward of every FTQ(λ) policy, sorted by λ.

    Attributes:
        lambdas (numpy.ndarray): Multipliers.
        mean_cost (numpy.ndarray): Mean discounted cost per multiplier.
        cost_std (numpy.ndarray): Standard deviation of the discounted cost across rollouts.
        mean_reward (numpy.ndarray): Mean discounted reward.
        n_rollouts (int): Environment rollouts spent building the curve.
    """

    lambdas: numpy.ndarray
    mean_cost: numpy.ndarray
    cost_std: numpy.ndarray
    mean_reward: numpy.ndarray
    n_rollouts: int = 0

    COLUMNS = ("lambda", "mean_cost", "cost_std", "mean_reward")

    def __post_init__(self):
        order = numpy.argsort(numpy.asarray(self.lambdas, dtype=numpy.float64), kind="stable")
        for name in ("lambdas", "mean_cost", "cost_std", "mean_reward"):
            setattr(self, name, numpy.asarray(getattr(self, name), dtype=numpy.float64)[order])
        stacked = numpy.stack([self.lambdas, self.mean_cost, self.cost_std, self.mean_reward])
        if not numpy.all(numpy.isfinite(stacked)):
            raise DomainError("calibration curve entries must be finite")

    def __len__(self):
        return len(self.lambdas)

    def to_frame(self):
        import pandas

        return pandas.DataFrame(
            numpy.column_stack([self.lambdas, self.mean_cost, self.cost_std, self.mean_reward]), columns=list(self.COLUMNS)
        )

    def to_csv(self, path: Union[str, Path]) -> Path:
        from budgetedrl.utils.files import write_frame

        return write_frame(self.to_frame(), path)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "CalibrationCurve":
        import pandas

        if not Path(path).exists():
            raise FileNotFoundError(f"calibration curve '{path}' does not exist")
        frame = pandas.read_csv(path)
        return cls(*(frame[c].to_numpy() for c in cls.COLUMNS))


def calibration_curve(
    policies: Sequence[LagrangianPolicy],
    env_factory: Callable,
    n_rollouts: int,
    seed: int,
    workers: int = 1,
) -> CalibrationCurve:
    """
    Estimate every policy's mean cost and reward from `n_rollouts` rollouts each, with derived seeds per policy.

    The budget is irrelevant to FTQ(λ) policies, so rollouts start from β₀ = 0.

    Raises:
        DomainError: `n_rollouts` < 1.
        EnvironmentFault: A rollout failed.
    """
    from .errors import EnvironmentFault
    from .evaluation import evaluate_policy

    if n_rollouts < 1:
        raise DomainError(f"calibration needs at least one rollout per policy, got {n_rollouts}")
    if not policies:
        raise DomainError("calibration needs at least one trained policy")
    stats = []
    for i, policy in enumerate(policies):
        sub_seed = int(numpy.random.SeedSequence([seed, i]).generate_state(1)[0])
        result = evaluate_policy(policy, env_factory, 0.0, n_rollouts, sub_seed, workers)
        if result.error is not None:
            raise EnvironmentFault(f"calibration rollouts of lambda={policy.lam:g} failed: {result.error}")
        g = result.returns
        stats.append((policy.lam, g[:, 1].mean(), g[:, 1].std(), g[:, 0].mean()))
    lambdas, mean_cost, cost_std, mean_reward = (numpy.asarray(c) for c in zip(*stats))
    curve = CalibrationCurve(lambdas, mean_cost, cost_std, mean_reward, n_rollouts * len(policies))
    logger.info(f"calibration curve built from {curve.n_rollouts} extra environment rollouts")
    return curve


def calibrate_from_curve(
    curve: CalibrationCurve, beta: float, deviation_margin: float = 0.0
) -> Tuple[int, int, float, bool]:
    """
    Choose the mixture of calibrated policies for budget β.

    The feasible policy λ+ is the smallest multiplier whose (optionally margin-inflated) mean cost is within β; λ- is
    its predecessor. The weight on λ- makes the interpolated mean cost equal β. When every policy is feasible the
    highest-reward one is returned alone; when none is, the cheapest one is returned with the infeasible flag.

    Args:
        curve (CalibrationCurve): Curve sorted by λ.
        beta (float): Target budget.
        deviation_margin (float): k of the conservative mode mean + k·std.

    Returns:
        (Tuple[int, int, float, bool]): Curve indices (feasible, risky), the weight on the risky one, infeasible flag.

    Examples:
        >>> curve = CalibrationCurve([0.0, 1.0], [0.8, 0.2], [0.0, 0.0], [2.0, 1.0])
        >>> calibrate_from_curve(curve, 0.5)
        (1, 0, 0.5, False)
    """
    if len(curve) == 0:
        raise DomainError("empty calibration curve")
    costs = curve.mean_cost + deviation_margin * curve.cost_std
    feasible = costs <= beta
    if feasible.all():
        best = int(numpy.argmax(curve.mean_reward))
        return best, best, 0.0, False
    if not feasible.any():
        cheapest = int(numpy.argmin(costs))
        logger.warning(f"no FTQ(lambda) policy satisfies beta={beta}; using the cheapest (cost {costs[cheapest]:.4f})")
        return cheapest, cheapest, 0.0, True
    safe = int(numpy.flatnonzero(feasible)[0])
    if safe == 0:
        return safe, safe, 0.0, False
    risky = safe - 1
    spread = costs[risky] - costs[safe]
    weight = float(numpy.clip((beta - costs[safe]) / spread, 0.0, 1.0)) if spread > 0 else 0.0
    return safe, risky, weight, False


def calibrate(
    policies: Sequence[LagrangianPolicy],
    env_factory: Callable,
    beta: float,
    n_rollouts: int,
    seed: int,
    deviation_margin: float = 0.0,
    workers: int = 1,
    curve: Optional[CalibrationCurve] = None,
) -> Tuple[CalibratedMixture, CalibrationCurve]:
    """
    Budget calibration of the FTQ(λ) policies: build (or reuse) the calibration curve and mix the flanking pair.

    Args:
        policies (Sequence[LagrangianPolicy]): One greedy policy per trained multiplier.
        env_factory (Callable): Builds a fresh environment.
        beta (float): Target budget.
        n_rollouts (int): Rollouts per policy for the cost estimates.
        seed (int): Calibration seed.
        deviation_margin (float): Conservative margin k, 0 for plain mean costs.
        workers (int): Worker processes for the rollouts.
        curve (CalibrationCurve | None): Previously estimated curve of the same policies.

    Returns:
        (Tuple[CalibratedMixture, CalibrationCurve]): The episode-level mixture and the curve used.
    """
    if n_rollouts < 1:
        raise DomainError(f"calibration needs at least one rollout per policy, got {n_rollouts}")
    order = sorted(range(len(policies)), key=lambda i: policies[i].lam)
    policies = [policies[i] for i in order]
    if curve is None:
        curve = calibration_curve(policies, env_factory, n_rollouts, seed, workers)
    assert len(curve) == len(policies), "calibration curve and policies differ in length"
    safe, risky, weight, infeasible = calibrate_from_curve(curve, beta, deviation_margin)
    logger.info(
        f"beta={beta}: lambda+={curve.lambdas[safe]:g}, lambda-={curve.lambdas[risky]:g}, weight on lambda- {weight:.3f}"
    )
    return CalibratedMixture(policies[safe], policies[risky], weight, infeasible), curve
