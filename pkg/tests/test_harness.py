import json
import os
from pathlib import Path

import pandas
import pytest

import budgetedrl
from budgetedrl.__main__ import main, parse_seeds
from budgetedrl._budgetedrl import ExperimentConfig, _merge, stage
from budgetedrl.envs.chain import ChainConfig
from budgetedrl.envs.corridors import CorridorsConfig
from budgetedrl.solvers.bftq import policy_from_q
from budgetedrl.solvers.errors import ConfigError, DomainError
from budgetedrl.solvers.evaluation import evaluate_policy
from budgetedrl.utils.files import run_dir


def test_default_config():
    cfg = budgetedrl.load_experiment_config()
    assert cfg.env == "corridors" and cfg.algorithms == ["bftq"]
    assert isinstance(cfg.env_config, CorridorsConfig)
    assert cfg.bftq.regressor.kind == "neural" and cfg.exploration.total_samples == 5000


def test_environment_file_overrides_sections():
    cfg = budgetedrl.load_experiment_config("chain.yaml", n_test=10, workers=None)
    assert cfg.env == "chain" and cfg.algorithms == ["bvi", "bftq"]
    assert isinstance(cfg.env_config, ChainConfig) and cfg.env_config.n_states == 3
    assert cfg.bftq.regressor.kind == "tabular" and cfg.bftq.gamma == 0.9
    assert cfg.n_test == 10 and cfg.workers == 1


def test_merge_is_recursive():
    merged = _merge({"a": 1, "b": {"x": 1, "y": 2}}, {"b": {"y": 3}, "c": 4})
    assert merged == {"a": 1, "b": {"x": 1, "y": 3}, "c": 4}


@pytest.mark.parametrize(
    "mapping",
    [
        {"algorithm": "sarsa"},
        {"algorithm": ["bvi"]},
        {"beta_eval_grid": [2.0]},
        {"n_seeds": 0},
        {"env": "pendulum"},
        {"episodes": 10},
    ],
)
def test_invalid_experiment_config(mapping):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(mapping)


def test_seed_derivation():
    cfg = ExperimentConfig(env="chain")
    assert cfg.seed_of(0) != cfg.seed_of(1)
    assert cfg.seed_of(1) == ExperimentConfig(env="chain").seed_of(1)
    assert list(parse_seeds("3..5")) == [3, 4, 5] and list(parse_seeds("7")) == [7]


def test_stage_tags_errors():
    with pytest.raises(DomainError) as info:
        with stage("train-bftq"):
            raise DomainError("empty batch")
    assert info.value.stage == "train-bftq"


def test_witness_command(tmp_path):
    assert main(["witness-noncontraction", "--epsilon", "0.1", "--gamma", "0.5", "0.9", "--out", str(tmp_path)]) == 0
    frame = pandas.read_csv(tmp_path / "witness.csv")
    assert len(frame) == 2
    assert frame["ratio"].tolist() == pytest.approx([10.0, 10.0], rel=1e-6)


def test_command_sets_debug_path(tmp_path, monkeypatch):
    monkeypatch.delenv("DEBUG_PATH", raising=False)
    assert main(["solve-bvi", "--config", "chain.yaml", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "baodebug").is_dir()
    assert Path(os.environ["DEBUG_PATH"]) == tmp_path / "baodebug"
    assert (tmp_path / "resolved_config.yaml").exists()


def test_run_dir_names_stage_and_seed(tmp_path):
    first = run_dir(tmp_path, "explore", seed=3)
    assert first == tmp_path / "explore_3" and first.is_dir()
    assert run_dir(tmp_path, "explore", seed=3) == tmp_path / "explore_3-2"
    assert run_dir(tmp_path, "explore", seed=3, exist_ok=True) == first
    assert run_dir(tmp_path, "run") == tmp_path / "run"


def test_failed_command_writes_error_json(tmp_path):
    assert main(["solve-bvi", "--out", str(tmp_path)]) == 1
    error = json.loads((tmp_path / "error.json").read_text())
    assert error["stage"] == "solve-bvi" and error["type"] == "ConfigError"


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 1
    assert json.loads((tmp_path / "error.json").read_text())["type"] == "FileNotFoundError"


def test_bvi_run_is_reproducible(tmp_path):
    cfg = budgetedrl.load_experiment_config("chain.yaml", algorithms=["bvi"], n_test=5, n_seeds=2)
    first = budgetedrl.run_experiment(cfg, tmp_path / "a")
    second = budgetedrl.run_experiment(cfg, tmp_path / "b")
    assert (first / "tradeoff.csv").read_text() == (second / "tradeoff.csv").read_text()
    frame = pandas.read_csv(first / "tradeoff.csv")
    assert frame["beta"].tolist() == [0.0, 0.5, 1.0] and set(frame["algorithm"]) == {"bvi"}
    assert frame["mean_gc"].iloc[0] == 0.0
    assert (first / "resolved_config.yaml").exists() and (first / "seed_1" / "bvi_q.bin").exists()


@pytest.mark.slow
def test_chain_acceptance(tmp_path):
    cfg = budgetedrl.load_experiment_config("chain.yaml", algorithms=["bvi", "bftq", "ftq-lambda"])
    frame = pandas.read_csv(budgetedrl.run_experiment(cfg, tmp_path) / "tradeoff.csv")
    for algorithm in ("bvi", "bftq"):
        rows = frame[frame["algorithm"] == algorithm]
        assert all(rows["mean_gc"] <= rows["beta"] + 0.05)
    bvi, bftq = (frame[frame["algorithm"] == a]["mean_gr"].to_numpy() for a in ("bvi", "bftq"))
    assert bftq == pytest.approx(bvi, rel=0.15)
    assert len(frame[frame["algorithm"] == "ftq-lambda"]) == 3


CORRIDORS_DESK_SCALE = """
env: corridors
n_seeds: 3
workers: 3
n_test: 500
bftq:
  epoch_ftq: 6
  regressor:
    architecture: 64x32
    epoch_nn: 300
exploration:
  n_samples: 2000
  n_minibatch: 10
"""


@pytest.mark.slow
def test_corridors_acceptance(tmp_path):
    path = tmp_path / "corridors_desk.yaml"
    path.write_text(CORRIDORS_DESK_SCALE)
    cfg = budgetedrl.load_experiment_config(path)
    frame = pandas.read_csv(budgetedrl.run_experiment(cfg, tmp_path / "run") / "tradeoff.csv")
    assert frame["beta"].tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert all(frame["mean_gc"] <= frame["beta"] + 0.1)
    low, high = frame.iloc[0], frame.iloc[-1]
    assert high["mean_gr"] - high["ci95_gr"] > low["mean_gr"] + low["ci95_gr"]


SLOT_FILLING_SMALL = """
env: slot_filling
n_seeds: 1
bftq:
  budget_grid: [0.0, 0.05, 1.0]
  epoch_ftq: 6
  regressor:
    architecture: 64x32
    size_beta_encoder: 8
    epoch_nn: 300
exploration:
  n_samples: 2000
  n_minibatch: 4
"""


@pytest.mark.slow
def test_slot_filling_numpad_use_grows_with_budget(tmp_path):
    path = tmp_path / "slot_filling_small.yaml"
    path.write_text(SLOT_FILLING_SMALL)
    cfg = budgetedrl.load_experiment_config(path)
    batch = budgetedrl.explore(cfg, cfg.seed, tmp_path).batch
    q, _ = budgetedrl.train_bftq(cfg, batch, tmp_path, cfg.seed)
    policy = policy_from_q(q, cfg.bftq)
    frequencies = []
    for beta in (0.0, 0.1, 0.25, 0.5, 1.0):
        transcript = tmp_path / f"transcript_{beta}.jsonl"
        evaluate_policy(policy, cfg.env_factory(), beta, 200, seed=1, transcript_path=transcript)
        turns = [json.loads(line)["system"] for line in transcript.read_text().splitlines()]
        frequencies.append(sum(t.startswith("ASK_NUM_PAD") for t in turns) / len(turns))
    assert all(b >= a - 0.05 for a, b in zip(frequencies, frequencies[1:]))
    assert frequencies[-1] > frequencies[0]
