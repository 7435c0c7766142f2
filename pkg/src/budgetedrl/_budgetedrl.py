"""
Pipelines behind the command line: one function per subcommand, and `run_experiment`, the full protocol of
exploration, training and per-seed evaluation ending in `tradeoff.csv`.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy

from budgetedrl.envs import env_configmap, make_env
from budgetedrl.envs.chain import ChainConfig, finite_chain_bmdp
from budgetedrl.solvers.bftq import BftqConfig, bftq_train, policy_from_q
from budgetedrl.solvers.bmdp import GriddedQ, TransitionBatch
from budgetedrl.solvers.budgeted_dp import budgeted_value_iteration, noncontraction_witness
from budgetedrl.solvers.errors import BudgetedRLError, ConfigError, EnvironmentFault
from budgetedrl.solvers.evaluation import (
    EvaluationResult,
    aggregate_tradeoff,
    evaluate_budgets,
    evaluate_policy,
    tradeoff_to_csv,
)
from budgetedrl.solvers.exploration import ExplorationConfig, ExplorationResult, collect_batch
from budgetedrl.solvers.lagrange import (
    LagrangeConfig,
    LagrangianPolicy,
    calibrate,
    calibration_curve,
    ftq_train,
    train_lambda_policies,
)
from budgetedrl.solvers.regressors import NeuralRegressor
from budgetedrl.utils import (
    CFG_DIR,
    DEFAULT_CFG_PATH,
    YAML,
    IterableSimpleNamespace,
    colorstr,
    config_from_dict,
    config_to_dict,
)
from budgetedrl.utils.files import run_dir, write_frame

import logging
logger = logging.getLogger(__name__)

env_cfg_pathmap = {
    "corridors": "corridors.yaml",
    "slot_filling": "slot_filling.yaml",
    "chain": "chain.yaml",
}
ALGORITHMS = ("bvi", "bftq", "ftq-lambda")


def _merge(base: dict, update: dict) -> dict:
    """Recursive dict update; sections present in both are merged key by key."""
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _env_section(env: str) -> dict:
    """The `env_config` section of the shipped configuration file of an environment."""
    if env not in env_cfg_pathmap:
        raise ConfigError(f"unknown environment '{env}', expected one of {sorted(env_cfg_pathmap)}")
    return YAML.load(CFG_DIR / env_cfg_pathmap[env]).get("env_config") or {}


@dataclass
class ExperimentConfig:
    """
    Everything a run needs, resolved from `default.yaml`, an optional user file and command-line overrides.

    Attributes:
        env (str): Environment name.
        env_config: Environment config dataclass; a mapping, a file path, or None (the shipped file's section).
        algorithms (list): Algorithms to run, among "bvi", "bftq" and "ftq-lambda".
        bftq (BftqConfig): BFTQ parameters, whose budget grid is also the BVI grid.
        exploration (ExplorationConfig): Batch collection parameters.
        lagrange (LagrangeConfig): FTQ(λ) parameters.
        n_seeds (int): Independent seeds.
        n_test (int): Evaluation trajectories per budget and seed.
        beta_eval_grid (list): Budgets at which the policies are evaluated.
        seed (int): Master seed; seed k of a run uses the derived seed (seed, k).
        workers (int): Concurrent seeds.
        bvi_tol (float): BVI residual tolerance.
        out (str): Output directory.
    """

    env: str = "corridors"
    env_config: object = None
    algorithms: List[str] = field(default_factory=lambda: ["bftq"])
    bftq: BftqConfig = field(default_factory=BftqConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    lagrange: LagrangeConfig = field(default_factory=LagrangeConfig)
    n_seeds: int = 1
    n_test: int = 1000
    beta_eval_grid: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    seed: int = 0
    workers: int = 1
    bvi_tol: float = 1e-8
    out: str = "runs/experiment"

    KEYMAP = {"algorithm": "algorithms", "n_eval_trajectories": "n_test"}

    @staticmethod
    def _convert(name, value):
        sections = {"bftq": BftqConfig, "exploration": ExplorationConfig, "lagrange": LagrangeConfig}
        if name in sections and not isinstance(value, sections[name]):
            return sections[name].from_dict(value)
        if name == "algorithms" and isinstance(value, str):
            return [value]
        if name == "beta_eval_grid":
            return [float(b) for b in value]
        return value

    def __post_init__(self):
        if self.env not in env_configmap:
            raise ValueError(f"unknown environment '{self.env}', expected one of {sorted(env_configmap)}")
        config_cls = env_configmap[self.env]
        if not isinstance(self.env_config, config_cls):
            section = self.env_config
            if section is None:
                section = _env_section(self.env)
            elif isinstance(section, (str, Path)):
                path = Path(section)
                section = YAML.load(path if path.exists() else CFG_DIR / path)
                section = section.get("env_config", section)
            self.env_config = config_cls.from_dict(section)
        self.algorithms = list(self.algorithms)
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown or not self.algorithms:
            raise ValueError(f"unknown algorithms {sorted(unknown)}, expected a subset of {ALGORITHMS}")
        if "bvi" in self.algorithms and self.env != "chain":
            raise ValueError("bvi needs a finite BMDP, use the 'chain' environment")
        if self.n_seeds < 1 or self.n_test < 1 or self.workers < 1:
            raise ValueError("n_seeds, n_test and workers must be at least 1")
        low, high = self.bftq.grid.budget_space
        if not self.beta_eval_grid or any(not low <= b <= high for b in self.beta_eval_grid):
            raise ValueError(f"beta_eval_grid must be a nonempty list within [{low}, {high}]")

    @classmethod
    def from_dict(cls, mapping, **overrides) -> "ExperimentConfig":
        return config_from_dict(cls, mapping, **overrides)

    def env_factory(self):
        """Picklable zero-argument environment constructor."""
        return partial(make_env, self.env, self.env_config)

    def seed_of(self, k: int) -> int:
        return int(numpy.random.SeedSequence([self.seed, k]).generate_state(1)[0])


def load_experiment_config(path: Optional[Union[str, Path]] = None, **overrides) -> ExperimentConfig:
    """
    Resolve an experiment configuration: `default.yaml`, then the user file on top, then `overrides`.

    Overrides set to None are ignored, so unset command-line flags keep the file values.
    """
    data = YAML.load(DEFAULT_CFG_PATH)
    if path is not None:
        path = Path(path)
        user = YAML.load(path if path.exists() or path.is_absolute() else CFG_DIR / path)
        if "env" in user and user["env"] != data.get("env"):
            data.pop("env_config", None)
        data = _merge(data, user)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return ExperimentConfig.from_dict(IterableSimpleNamespace(**data), **overrides)


def save_resolved_config(cfg: ExperimentConfig, out: Union[str, Path]) -> Path:
    path = Path(out) / "resolved_config.yaml"
    YAML.save(path, config_to_dict(cfg), header="# fully resolved run configuration\n")
    return path


@contextmanager
def stage(name: str):
    """Tag any BudgetedRLError raised inside with the pipeline stage it came from."""
    try:
        yield
    except BudgetedRLError as e:
        if getattr(e, "stage", None) is None:
            e.stage = name
        raise


def _n_actions(cfg: ExperimentConfig) -> int:
    return cfg.env_factory()().n_actions


def _check_gamma(cfg: ExperimentConfig) -> None:
    env_gamma = cfg.env_factory()().gamma
    if cfg.bftq.gamma != env_gamma:
        logger.warning(f"bftq gamma {cfg.bftq.gamma} differs from the environment's {env_gamma}")


def _greedy_bftq(batch: TransitionBatch, n_actions: int, bftq: BftqConfig, seed: int):
    q, _ = bftq_train(batch, n_actions, bftq, numpy.random.Generator(numpy.random.Philox(seed)))
    return policy_from_q(q, bftq)


def _greedy_reward_only(batch: TransitionBatch, n_actions: int, lagrange: LagrangeConfig, seed: int):
    q, _ = ftq_train(batch, n_actions, 0.0, lagrange, numpy.random.Generator(numpy.random.Philox(seed)))
    return LagrangianPolicy(q, 0.0)


def solve_bvi(cfg: ExperimentConfig, out: Union[str, Path]):
    """
    Budgeted Value Iteration on the configured finite BMDP; writes `bvi_q.bin` and `bvi_convergence.csv`.

    Returns:
        (Tuple[GriddedQ, ConvergenceReport]): The value iterate and its residuals.
    """
    if not isinstance(cfg.env_config, ChainConfig):
        raise ConfigError("solve-bvi needs the finite 'chain' environment")
    out = Path(out)
    with stage("solve-bvi"):
        mdp = cfg.env_config.build_mdp()
        q, report = budgeted_value_iteration(mdp, cfg.bftq.grid, tol=cfg.bvi_tol, workers=cfg.bftq.workers)
    q.save(out / "bvi_q.bin")
    report.to_csv(out / "bvi_convergence.csv")
    return q, report


def explore(cfg: ExperimentConfig, seed: int, out: Union[str, Path]) -> ExplorationResult:
    """
    Collect a batch with the configured strategy; writes `batch.bin`, `batch.csv` and `exploration_log.csv`.

    Risk-sensitive exploration acts greedily with BFTQ policies retrained between minibatches; risk-neutral
    exploration with reward-only fitted-Q policies.

    Raises:
        EnvironmentFault: An episode failed; the partial batch is written first.
    """
    out = Path(out)
    n_actions = _n_actions(cfg)
    if cfg.exploration.strategy == "risk_neutral":
        train = partial(_greedy_reward_only, n_actions=n_actions, lagrange=cfg.lagrange, seed=seed)
    else:
        train = partial(_greedy_bftq, n_actions=n_actions, bftq=cfg.bftq, seed=seed)
    with stage("explore"):
        grid = cfg.bftq.grid
        result = collect_batch(cfg.env_factory(), cfg.exploration, seed, grid.budget_space, train, grid)
    result.batch.save(out / "batch.bin")
    result.batch.to_csv(out / "batch.csv")
    write_frame(result.log, out / "exploration_log.csv")
    if result.error is not None:
        error = EnvironmentFault(f"exploration interrupted: {result.error}")
        error.stage = "explore"
        raise error
    logger.info(f"collected {len(result.batch)} transitions in {len(result.log)} episodes ({result.n_trainings} trainings)")
    return result


def train_bftq(cfg: ExperimentConfig, batch: Union[TransitionBatch, str, Path], out: Union[str, Path], seed: int):
    """Train BFTQ on a batch; writes `bftq_q.bin` (neural regressors) and `bftq_report.csv`."""
    out = Path(out)
    batch = batch if isinstance(batch, TransitionBatch) else TransitionBatch.load(batch)
    _check_gamma(cfg)
    with stage("train-bftq"):
        q, report = bftq_train(batch, _n_actions(cfg), cfg.bftq, numpy.random.Generator(numpy.random.Philox(seed)))
    if isinstance(q, NeuralRegressor):
        q.save(out / "bftq_q.bin")
    report.to_csv(out / "bftq_report.csv")
    return q, report


def train_ftq_lambda(cfg: ExperimentConfig, batch: Union[TransitionBatch, str, Path], out: Union[str, Path], seed: int):
    """Train one FTQ(λ) per multiplier; writes `ftq_lambda_<i>.bin`, `ftq_lambda_<i>_report.csv` and `lambdas.csv`."""
    import pandas

    out = Path(out)
    batch = batch if isinstance(batch, TransitionBatch) else TransitionBatch.load(batch)
    with stage("train-ftq-lambda"):
        fitted = train_lambda_policies(batch, _n_actions(cfg), cfg.lagrange, seed)
    for i, (lam, q, report) in enumerate(fitted):
        if isinstance(q, NeuralRegressor):
            q.save(out / f"ftq_lambda_{i}.bin")
        report.to_csv(out / f"ftq_lambda_{i}_report.csv")
    write_frame(pandas.DataFrame({"index": range(len(fitted)), "lambda": [f[0] for f in fitted]}), out / "lambdas.csv")
    return fitted


def evaluate(
    cfg: ExperimentConfig,
    model: Union[str, Path],
    out: Union[str, Path],
    seed: int,
    algorithm: str = "bftq",
    debug_dir: Optional[Union[str, Path]] = None,
):
    """
    Evaluate a saved budgeted Q-function (`bftq_q.bin` or `bvi_q.bin`) on `cfg.beta_eval_grid`.

    Writes `tradeoff.csv` with one row per budget (a single seed) and the transcript of the first budget's
    trajectories as `transcripts.jsonl`.
    """
    out = Path(out)
    q = GriddedQ.load(model) if algorithm == "bvi" else NeuralRegressor.load(model, cfg.bftq.regressor)
    policy = policy_from_q(q, cfg.bftq, debug_dir)
    with stage("evaluate"):
        transcript = out / "transcripts.jsonl"
        evaluate_policy(policy, cfg.env_factory(), cfg.beta_eval_grid[0], 1, seed, transcript_path=transcript)
        results = evaluate_budgets(policy, cfg.env_factory(), cfg.beta_eval_grid, cfg.n_test, seed)
    _raise_on_partial(results, "evaluate")
    records = [aggregate_tradeoff(algorithm, [r]) for r in results]
    tradeoff_to_csv(records, out / "tradeoff.csv")
    return records


def _raise_on_partial(results: Sequence[EvaluationResult], name: str) -> None:
    for r in results:
        if r.error is not None:
            error = EnvironmentFault(f"evaluation at beta={r.beta} interrupted: {r.error}")
            error.stage = name
            raise error


def run_seed(cfg: ExperimentConfig, k: int, out: Union[str, Path]) -> Dict[str, List[EvaluationResult]]:
    """
    One seed of the protocol: explore (when a batch-trained algorithm is requested), train every algorithm, and
    evaluate it at every budget of `cfg.beta_eval_grid`. Artifacts go to `out`.

    Returns:
        (Dict[str, List[EvaluationResult]]): Per algorithm, one evaluation per budget.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed_of(k)
    eval_seed = int(numpy.random.SeedSequence([seed, 1]).generate_state(1)[0])
    env_factory = cfg.env_factory()
    results = {}

    if "bvi" in cfg.algorithms:
        q, _ = solve_bvi(cfg, out)
        with stage(f"seed {k}: evaluate bvi"):
            policy = policy_from_q(q, cfg.bftq)
            results["bvi"] = evaluate_budgets(policy, env_factory, cfg.beta_eval_grid, cfg.n_test, eval_seed)

    batch = None
    if {"bftq", "ftq-lambda"} & set(cfg.algorithms):
        batch = explore(cfg, seed, out).batch

    if "bftq" in cfg.algorithms:
        q, _ = train_bftq(cfg, batch, out, seed)
        with stage(f"seed {k}: evaluate bftq"):
            policy = policy_from_q(q, cfg.bftq)
            results["bftq"] = evaluate_budgets(policy, env_factory, cfg.beta_eval_grid, cfg.n_test, eval_seed)
        logger.info(f"seed {k}: BFTQ used 0 calibration rollouts")

    if "ftq-lambda" in cfg.algorithms:
        fitted = train_ftq_lambda(cfg, batch, out, seed)
        policies = [LagrangianPolicy(q, lam) for lam, q, _ in fitted]
        with stage(f"seed {k}: calibrate ftq-lambda"):
            curve = calibration_curve(policies, env_factory, cfg.lagrange.n_rollouts, seed, cfg.lagrange.workers)
        curve.to_csv(out / "calibration.csv")
        evaluations = []
        for j, beta in enumerate(cfg.beta_eval_grid):
            mixture, _ = calibrate(
                policies, env_factory, beta, cfg.lagrange.n_rollouts, seed, cfg.lagrange.deviation_margin, curve=curve
            )
            sub_seed = int(numpy.random.SeedSequence([eval_seed, j]).generate_state(1)[0])
            with stage(f"seed {k}: evaluate ftq-lambda"):
                evaluations.append(evaluate_policy(mixture, env_factory, beta, cfg.n_test, sub_seed))
        results["ftq-lambda"] = evaluations
        logger.info(f"seed {k}: FTQ(lambda) used {curve.n_rollouts} calibration rollouts")

    for name, evaluations in results.items():
        _raise_on_partial(evaluations, f"seed {k}: evaluate {name}")
    return results


def run_experiment(cfg: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Path:
    """
    Full protocol over `cfg.n_seeds` seeds, run as independent jobs, aggregated into `tradeoff.csv`.

    Output tree: `resolved_config.yaml`, `seed_<k>/` (batch, models, reports, calibration curve), `tradeoff.csv`
    with |beta_eval_grid| rows per algorithm (mean and 95% Student-t half-width over seeds).

    Returns:
        (Path): The output directory.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved_config(cfg, out)
    logger.info(f"running {', '.join(cfg.algorithms)} on {cfg.env} with {cfg.n_seeds} seeds into {colorstr(str(out))}")
    jobs = [(k, run_dir(out, "seed", k, exist_ok=True)) for k in range(cfg.n_seeds)]
    if cfg.workers > 1 and cfg.n_seeds > 1:
        from joblib import Parallel, delayed

        per_seed = Parallel(n_jobs=min(cfg.workers, cfg.n_seeds))(delayed(run_seed)(cfg, k, d) for k, d in jobs)
    else:
        per_seed = [run_seed(cfg, k, d) for k, d in jobs]

    records = []
    for name in cfg.algorithms:
        for j in range(len(cfg.beta_eval_grid)):
            records.append(aggregate_tradeoff(name, [seed_results[name][j] for seed_results in per_seed]))
    tradeoff_to_csv(records, out / "tradeoff.csv")
    logger.info(f"wrote {len(records)} trade-off rows to {out / 'tradeoff.csv'}")
    return out


def witness_noncontraction(
    epsilons: Sequence[float] = (1.0, 0.1, 0.01),
    gammas: Sequence[float] = (0.5, 0.9),
    out: Optional[Union[str, Path]] = None,
):
    """
    Contraction ratio of the optimality operator on the witness pair for every (ε, γ), on a two-state BMDP.

    Returns:
        (pandas.DataFrame): Columns epsilon, gamma, ratio, lower_bound (= 1/ε); also written to `witness.csv`.
    """
    import pandas

    rows = []
    for gamma in gammas:
        mdp = finite_chain_bmdp(2, seed=0, gamma=gamma)
        for epsilon in epsilons:
            rows.append((epsilon, gamma, noncontraction_witness(epsilon, mdp), 1.0 / epsilon))
    frame = pandas.DataFrame(rows, columns=["epsilon", "gamma", "ratio", "lower_bound"])
    if out is not None:
        write_frame(frame, Path(out) / "witness.csv")
    return frame
