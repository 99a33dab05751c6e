import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from src.components.network import DenseNet
from src.config.configuration import config_from_dict
from src.exceptions import UsageError
from src.pipelines.experiment_pipeline import ExperimentPipeline, ExperimentRecord, build_report
from src.services.trainer import train

SMALL = {
    "name": "small",
    "seed": 2,
    "data": {"n_features": 5, "n_samples": 60},
    "train": {"hidden": [6], "epochs": 3, "batch_size": 10, "k": 2},
    "attack": {"k": 2, "step_size": 0.05, "max_iters": 8},
    "thickness": {"m1": 4, "m2": 2},
    "n_eval_samples": 4,
}


@pytest.fixture
def config(monkeypatch):
    monkeypatch.delenv("RANKSHIELD_SEED", raising=False)
    return config_from_dict(SMALL)


def test_prepare_data_fits_on_train(config):
    train_set, test_set = ExperimentPipeline(config).prepare_data()
    assert train_set.n_samples == 48 and test_set.n_samples == 12
    np.testing.assert_allclose(train_set.features.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_array_equal(train_set.normalization.shift, test_set.normalization.shift)


def test_train_is_reproducible(tmp_path, config):
    first = ExperimentPipeline(config, str(tmp_path / "a")).run_train()
    second = ExperimentPipeline(config, str(tmp_path / "b")).run_train()
    assert first.aggregates == second.aggregates
    with open(first.model_path, encoding="utf-8") as a, open(second.model_path, encoding="utf-8") as b:
        assert a.read() == b.read()


def test_record_round_trip(tmp_path, config):
    record = ExperimentPipeline(config, str(tmp_path / "run")).run_train()
    loaded = ExperimentRecord.load(str(tmp_path / "run"))
    assert loaded.run_id == record.run_id == "run"
    assert loaded.aggregates == record.aggregates
    assert loaded.config["train"]["hidden"] == [6]
    assert loaded.k == 2
    assert loaded.method == "vanilla"
    assert loaded.name == "small"
    assert os.path.isfile(str(tmp_path / "run" / "results.jsonl"))
    assert len(loaded.rows) == len(record.rows) > 0
    assert [row["epoch"] for row in loaded.rows] == [row["epoch"] for row in record.rows]
    assert [row["sample_id"] for row in loaded.rows] == list(range(len(record.rows)))


def test_attack_and_thickness_feed_the_report(tmp_path, config):
    pipeline = ExperimentPipeline(config, str(tmp_path / "train"))
    train_record = pipeline.run_train()
    model = DenseNet.load(train_record.model_path)
    dataset = pipeline.evaluation_data()

    attack = ExperimentPipeline(config, str(tmp_path / "attack")).run_attack(model, dataset)
    assert len(attack.rows) == 4
    assert attack.aggregates["processed_fraction"] == 1.0
    assert all(row["first_flip_iter"] <= 9 for row in attack.rows)
    assert [row["sample_id"] for row in ExperimentRecord.load(str(tmp_path / "attack")).rows] == [0, 1, 2, 3]

    adversarial = pd.read_csv(str(tmp_path / "attack" / "adversarial.csv"))
    assert list(adversarial["sample_id"]) == [0, 1, 2, 3]
    raw = adversarial[dataset.feature_names].to_numpy()
    # written in source units; mapping back lands within max_iters * step_size of the inputs
    moved = dataset.normalization.apply(raw) - dataset.features[:4]
    assert np.max(np.linalg.norm(moved, axis=1)) <= 8 * 0.05 + 1e-9
    assert not np.allclose(raw, dataset.normalization.apply(raw))

    thickness = ExperimentPipeline(config, str(tmp_path / "thickness")).run_thickness(model, dataset)
    assert 0.0 <= thickness.aggregates["model_thickness"] <= 1.0
    assert all(row["hessian_norm"] >= 0.0 for row in thickness.rows)

    outputs = build_report([str(tmp_path / "attack"), str(tmp_path / "thickness")], str(tmp_path / "report"))
    scatter = pd.read_csv(outputs["scatter"])
    assert list(scatter["sample_id"]) == [0, 1, 2, 3]
    assert {"thickness", "hessian_norm", "first_flip_iter"} <= set(scatter.columns)
    correlations = pd.read_csv(outputs["correlations"])
    assert len(correlations) == 6
    table = pd.read_csv(outputs["table"])
    assert table.loc[0, "precision_at_k_pct"] == pytest.approx(100.0 * attack.aggregates["precision_at_k"])


def test_evaluate_requires_metrics(tmp_path, config):
    pipeline = ExperimentPipeline(config, str(tmp_path / "e"))
    train_set, _ = pipeline.prepare_data()
    net, _ = train(config.train, train_set)
    with pytest.raises(UsageError):
        pipeline.run_evaluate(net, train_set, metrics=[])


def test_evaluate_with_mean_removal(tmp_path, config):
    pipeline = ExperimentPipeline(replace(config, removal="mean"), str(tmp_path / "e"))
    train_set, test_set = pipeline.prepare_data()
    net, _ = train(config.train, train_set)
    record = pipeline.run_evaluate(net, test_set, metrics=["dffot", "suff"])
    assert 0.0 < record.aggregates["dffot"] <= 1.0
    assert record.aggregates["suff"] >= 0.0
    assert os.path.isfile(str(tmp_path / "e" / "metrics.json"))


def test_report_needs_records(tmp_path):
    with pytest.raises(UsageError):
        build_report([], str(tmp_path / "r"))
