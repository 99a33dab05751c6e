import json
import os

import pytest

from src.cli import build_parser, exit_code, main
from src.exceptions import (
    ConfigError,
    IngestionError,
    NumericError,
    TrainingDivergenceError,
    UsageError,
)

TINY_CONFIG = """
name: tiny
seed: 1
data:
  n_features: 4
  n_samples: 40
train:
  method: vanilla
  hidden: [4]
  epochs: 2
  batch_size: 8
  k: 2
attack:
  k: 2
  step_size: 0.05
  max_iters: 5
thickness:
  m1: 4
  m2: 2
n_eval_samples: 3
"""


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv("RANKSHIELD_SEED", raising=False)


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


@pytest.fixture
def trained(tmp_path, config_path):
    out = str(tmp_path / "train")
    assert main(["train", "--config", config_path, "--out", out]) == 0
    return out


def test_train_writes_run_directory(trained):
    for name in ("model.json", "history.csv", "train.csv", "test.csv", "dataset_manifest.json", "record.json"):
        assert os.path.isfile(os.path.join(trained, name))
    with open(os.path.join(trained, "record.json"), encoding="utf-8") as handle:
        record = json.load(handle)
    assert record["command"] == "train"
    assert record["aggregates"]["epochs_run"] == 2
    assert "test_auc" in record["aggregates"]


def test_attack_evaluate_thickness_and_report(tmp_path, config_path, trained):
    model = os.path.join(trained, "model.json")
    attack_dir = str(tmp_path / "attack")
    assert main(["attack", "--config", config_path, "--model", model, "--out", attack_dir, "--trajectories"]) == 0
    assert os.path.isfile(os.path.join(attack_dir, "metrics.csv"))
    assert os.path.isfile(os.path.join(attack_dir, "trajectories", "sample_0.csv"))

    evaluate_dir = str(tmp_path / "evaluate")
    args = ["evaluate", "--config", config_path, "--model", model, "--out", evaluate_dir, "--metrics", "auc,dffot,comp"]
    assert main(args) == 0
    with open(os.path.join(evaluate_dir, "metrics.json"), encoding="utf-8") as handle:
        aggregates = json.load(handle)["aggregates"]
    assert {"auc", "dffot", "comp"} <= set(aggregates)

    thickness_dir = str(tmp_path / "thickness")
    assert main(["thickness", "--config", config_path, "--model", model, "--out", thickness_dir, "--k", "2"]) == 0
    assert os.path.isfile(os.path.join(thickness_dir, "thickness.csv"))

    report_dir = str(tmp_path / "report")
    assert main(["report", trained, attack_dir, thickness_dir, "--out", report_dir]) == 0
    for name in ("table.csv", "scatter.csv", "correlations.csv", "report.json"):
        assert os.path.isfile(os.path.join(report_dir, name))


def test_attack_on_explicit_csv(tmp_path, config_path, trained):
    model = os.path.join(trained, "model.json")
    data = os.path.join(trained, "test.csv")
    assert main(["attack", "--config", config_path, "--model", model, "--data", data, "--out", str(tmp_path / "a")]) == 0


def test_report_rejects_mixed_k(tmp_path, config_path, trained):
    model = os.path.join(trained, "model.json")
    other = tmp_path / "k1.yaml"
    other.write_text(TINY_CONFIG.replace("attack:\n  k: 2", "attack:\n  k: 1"), encoding="utf-8")
    attack_dir = str(tmp_path / "attack_k1")
    assert main(["attack", "--config", str(other), "--model", model, "--out", attack_dir]) == 0
    assert main(["report", trained, attack_dir, "--out", str(tmp_path / "report")]) == 2


def test_missing_config_is_a_usage_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "t")]) == 2


def test_invalid_learning_rate(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  lr: -1\n", encoding="utf-8")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "t")]) == 2


def test_empty_metric_list(tmp_path, config_path, trained):
    model = os.path.join(trained, "model.json")
    assert main(["evaluate", "--config", config_path, "--model", model, "--metrics", ",", "--out", str(tmp_path / "e")]) == 2


def test_missing_model_is_an_io_error(tmp_path, config_path):
    args = ["attack", "--config", config_path, "--model", str(tmp_path / "absent.json"), "--out", str(tmp_path / "a")]
    assert main(args) == 4


def test_parser_errors_and_help():
    assert main(["--help"]) == 0
    assert main(["explode"]) == 2
    assert main(["attack"]) == 2


def test_exit_codes():
    assert exit_code(TrainingDivergenceError("boom", 3)) == 3
    assert exit_code(NumericError("lp")) == 3
    assert exit_code(IngestionError("io")) == 4
    assert exit_code(ConfigError("bad")) == 2
    assert exit_code(UsageError("bad")) == 2


def test_seed_flag_overrides_config():
    args = build_parser().parse_args(["train", "--seed", "9"])
    assert args.seed == 9
    assert args.command == "train"
