"""
Experiment Pipeline
Handles the complete workflow: Data → Train → Attack → Evaluate → Thickness → Report
Every command writes a self-contained run directory under runs/<run_id>/.
"""

import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.components.curvature import power_iteration
from src.components.data_ingestion import Dataset, SynthSpec, load_csv, normalize, split, synth_gaussians, write_manifest
from src.components.explainer import explain_with
from src.components.network import DenseNet
from src.components.thickness import PerturbDistribution, thickness_scan
from src.config.configuration import ExperimentConfig
from src.config.constants import RUNS_DIR, SOFTWARE_VERSION
from src.exceptions import AttackError, UndefinedMetricError, UsageError
from src.logger import logger
from src.services.attacks import first_flip_scan
from src.services.evaluator import MetricReport, auc, comp, correlation, dffot, suff
from src.services.trainer import train
from src.utils.common import append_jsonl, ensure_dir, read_json, read_jsonl, write_csv, write_json

MIN_PROCESSED_FRACTION = 0.95
RESULTS_FILE = "results.jsonl"
SCATTER_COLUMNS = ("thickness", "hessian_norm", "first_flip_iter")


@dataclass
class ExperimentRecord:
    run_id: str
    timestamp: str
    command: str
    config: dict
    model_path: Optional[str]
    rows: List[dict] = field(default_factory=list)
    aggregates: Dict[str, float] = field(default_factory=dict)
    software_version: str = SOFTWARE_VERSION

    @property
    def name(self) -> str:
        return self.config.get("name", self.run_id)

    @property
    def method(self) -> str:
        return self.config.get("train", {}).get("method", "unknown")

    @property
    def k(self) -> int:
        section = "train" if self.command == "train" else "attack"
        return int(self.config.get(section, {}).get("k"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentRecord":
        return cls(**payload)

    def save(self, path: str) -> str:
        """Writes record.json at `path`; the per-sample rows go to results.jsonl beside it."""
        payload = self.to_dict()
        rows = payload.pop("rows")
        results = os.path.join(os.path.dirname(path), RESULTS_FILE)
        if os.path.exists(results):
            os.remove(results)
        if rows:
            append_jsonl(results, rows)
        return write_json(path, payload)

    @classmethod
    def load(cls, path: str) -> "ExperimentRecord":
        """Accepts a record.json path or the run directory holding one."""
        if os.path.isdir(path):
            path = os.path.join(path, "record.json")
        payload = read_json(path)
        results = os.path.join(os.path.dirname(path), RESULTS_FILE)
        payload["rows"] = read_jsonl(results) if os.path.isfile(results) else []
        return cls.from_dict(payload)


class ExperimentPipeline:
    """
    One experiment configuration driven through the harness commands.
    """

    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = out_dir
        self.timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        logger.info(f"Experiment pipeline initialized for '{config.name}' (seed={config.seed}, jobs={config.jobs})")

    def _run_dir(self, command: str) -> str:
        if self.out_dir:
            return ensure_dir(self.out_dir)
        return ensure_dir(os.path.join(RUNS_DIR, f"{self.config.name}_{command}_{self.timestamp}"))

    def _record(self, command: str, run_dir: str, model_path: Optional[str], report: MetricReport) -> ExperimentRecord:
        record = ExperimentRecord(
            run_id=os.path.basename(os.path.normpath(run_dir)),
            timestamp=self.timestamp,
            command=command,
            config=self.config.to_dict(),
            model_path=model_path,
            rows=report.rows,
            aggregates=report.aggregates,
        )
        record.save(os.path.join(run_dir, "record.json"))
        return record

    def prepare_data(self) -> Tuple[Dataset, Dataset]:
        """(train, test) splits normalized with statistics fitted on the train split."""
        data = self.config.data
        if data.path:
            dataset = load_csv(data.path, data.label_column, data.has_header)
        else:
            dataset = synth_gaussians(
                SynthSpec(data.n_features, data.n_samples, data.class_separation, data.noise, data.synth_seed)
            )
        train_set, _, test_set = split(dataset, data.fractions, data.split_seed)
        train_set = normalize(train_set, data.normalization)
        if data.normalization != "none" and test_set.n_samples:
            test_set = normalize(test_set, data.normalization, train_set.normalization)
        return train_set, test_set

    def evaluation_data(self, data_path: Optional[str] = None) -> Dataset:
        """The given CSV as-is (already in model space), or the configured test split."""
        if data_path:
            return load_csv(data_path, self.config.data.label_column, self.config.data.has_header)
        _, test_set = self.prepare_data()
        return test_set

    def _samples(self, dataset: Dataset) -> np.ndarray:
        limit = self.config.n_eval_samples
        features = dataset.features if limit is None else dataset.features[:limit]
        if features.shape[0] == 0:
            raise UsageError("no samples to evaluate", sys)
        return features

    def run_train(self) -> ExperimentRecord:
        logger.info("=" * 80)
        logger.info(f"TRAIN: {self.config.train.method}")
        run_dir = self._run_dir("train")

        logger.info("Step 1/3: Preparing data...")
        train_set, test_set = self.prepare_data()
        train_set.to_csv(os.path.join(run_dir, "train.csv"))
        if test_set.n_samples:
            test_set.to_csv(os.path.join(run_dir, "test.csv"))
        write_manifest(
            os.path.join(run_dir, "dataset_manifest.json"),
            train_set,
            self.config.data.split_seed,
            {"n_train": train_set.n_samples, "n_test": test_set.n_samples},
        )

        logger.info("Step 2/3: Training...")
        net, history = train(self.config.train, train_set, self.config.attack.order_by)
        model_path = net.save(os.path.join(run_dir, "model.json"))
        write_csv(os.path.join(run_dir, "history.csv"), history.to_rows())

        logger.info("Step 3/3: Scoring...")
        report = MetricReport(metadata={"command": "train"})
        for row in history.to_rows():
            report.rows.append({"sample_id": row["epoch"] - 1, **row})
        record = self._record("train", run_dir, model_path, report)
        record.aggregates = {
            "final_loss": history.loss[-1],
            "train_accuracy": history.accuracy[-1],
            "epochs_run": history.epochs_run,
        }
        if test_set.n_samples and net.n_classes == 2 and np.unique(test_set.labels).size == 2:
            record.aggregates["test_auc"] = auc(net, test_set.features, test_set.labels)
        record.save(os.path.join(run_dir, "record.json"))
        logger.info(f"Training finished: {record.aggregates}")
        logger.info("=" * 80)
        return record

    def run_attack(self, model: DenseNet, dataset: Dataset, model_path: Optional[str] = None, trajectories: bool = False) -> ExperimentRecord:
        logger.info("=" * 80)
        attack = self.config.attack
        logger.info(f"ATTACK: {attack.method} (k={attack.k}, step={attack.step_size}, iters={attack.max_iters})")
        run_dir = self._run_dir("attack")
        features = self._samples(dataset)
        scan = first_flip_scan(model, features, attack, self.config.moo, self.config.jobs)

        report = MetricReport(metadata={"command": "attack", "method": attack.method})
        for index, result in enumerate(scan.results):
            if result is None:
                continue
            report.add(
                index,
                precision_at_k=result.final_p_at_k,
                first_flip_iter=scan.iterations[index],
                flipped=result.first_flip_iter is not None,
                verdict=result.verdict,
                iters_run=result.iters_run,
                prediction_preserved=result.prediction_preserved,
            )
            if trajectories or self.config.write_trajectories:
                write_csv(os.path.join(run_dir, "trajectories", f"sample_{index}.csv"), result.trajectory_rows())

        processed = 1.0 - len(scan.failures) / features.shape[0]
        if processed < MIN_PROCESSED_FRACTION:
            logger.error(f"Only {processed:.1%} of samples were attacked successfully")
            raise AttackError(f"only {processed:.1%} of samples were processed (failures: {scan.failures})", sys)

        # adversarial inputs in the units of the source data
        attacked = [index for index, result in enumerate(scan.results) if result is not None]
        adversarial = replace(dataset.subset(attacked), features=np.array([scan.results[i].x_adv for i in attacked]))
        write_csv(
            os.path.join(run_dir, "adversarial.csv"),
            [{"sample_id": i, **dict(zip(dataset.feature_names, row))} for i, row in zip(attacked, adversarial.inverse_transform())],
        )
        report.to_csv(os.path.join(run_dir, "metrics.csv"))
        record = self._record("attack", run_dir, model_path, report)
        record.aggregates["processed_fraction"] = processed
        record.save(os.path.join(run_dir, "record.json"))
        logger.info(f"Attack finished: {record.aggregates}")
        logger.info("=" * 80)
        return record

    def run_evaluate(
        self,
        model: DenseNet,
        dataset: Dataset,
        metrics: Optional[Sequence[str]] = None,
        model_path: Optional[str] = None,
    ) -> ExperimentRecord:
        metrics = list(self.config.metrics if metrics is None else metrics)
        if not metrics:
            raise UsageError("no metrics requested", sys)
        logger.info("=" * 80)
        logger.info(f"EVALUATE: {metrics}")
        run_dir = self._run_dir("evaluate")
        features = self._samples(dataset)
        explanation = self.config.explanation
        order_by = self.config.attack.order_by
        baseline = dataset.features.mean(axis=0) if self.config.removal == "mean" else None

        report = MetricReport(metadata={"command": "evaluate", "metrics": metrics, "explanation": explanation.method})
        flip_iterations = None
        if "precision_at_k" in metrics:
            scan = first_flip_scan(model, features, self.config.attack, self.config.moo, self.config.jobs)
            flip_iterations = scan
        faithfulness = [m for m in metrics if m in ("dffot", "comp", "suff")]
        for index, point in enumerate(features):
            row: Dict[str, object] = {}
            if flip_iterations is not None:
                result = flip_iterations.results[index]
                row["precision_at_k"] = result.final_p_at_k if result is not None else None
                row["first_flip_iter"] = flip_iterations.iterations[index]
            if faithfulness:
                saliency = explain_with(model, point, explanation.method, **explanation.params())
                if "dffot" in faithfulness:
                    row["dffot"] = dffot(model, point, saliency, order_by, baseline).fraction
                if "comp" in faithfulness:
                    row["comp"] = comp(model, point, saliency, order_by=order_by, baseline=baseline)
                if "suff" in faithfulness:
                    row["suff"] = suff(model, point, saliency, order_by=order_by, baseline=baseline)
            if row:
                report.add(index, **row)

        if report.rows:
            report.to_csv(os.path.join(run_dir, "metrics.csv"))
        record = self._record("evaluate", run_dir, model_path, report)
        if "auc" in metrics:
            record.aggregates["auc"] = auc(model, dataset.features, dataset.labels)
            record.save(os.path.join(run_dir, "record.json"))
        write_json(os.path.join(run_dir, "metrics.json"), report.to_dict() | {"aggregates": record.aggregates})
        logger.info(f"Evaluation finished: {record.aggregates}")
        logger.info("=" * 80)
        return record

    def distribution(self) -> PerturbDistribution:
        settings = self.config.thickness
        if settings.kind == "gaussian":
            return PerturbDistribution.gaussian(settings.sigma2)
        if settings.kind == "adversarial":
            return PerturbDistribution.adversarial(self.config.attack, settings.epsilon)
        return PerturbDistribution.uniform_ball(settings.epsilon)

    def run_thickness(
        self,
        model: DenseNet,
        dataset: Dataset,
        k: Optional[int] = None,
        model_path: Optional[str] = None,
    ) -> ExperimentRecord:
        settings = self.config.thickness
        if k is not None:
            self.config = replace(self.config, attack=replace(self.config.attack, k=k))
        k = self.config.attack.k
        logger.info("=" * 80)
        logger.info(f"THICKNESS: top-{k}, {settings.variant}, {settings.kind}")
        run_dir = self._run_dir("thickness")
        features = self._samples(dataset)
        explanation = self.config.explanation

        estimates = thickness_scan(
            model,
            features,
            k,
            self.distribution(),
            settings.m1,
            settings.m2,
            settings.variant,
            self.config.seed,
            self.config.jobs,
            self.config.attack.order_by,
            explanation.method,
            explanation.params(),
        )
        classes = np.atleast_1d(model.predict(features))
        hessian_norms, _ = power_iteration(model, features, classes, seed=self.config.seed)

        report = MetricReport(metadata={"command": "thickness", "k": k, **self.distribution().describe()})
        for index, estimate in enumerate(estimates):
            report.add(
                index,
                thickness=estimate.value,
                std_error=estimate.std_error,
                hessian_norm=float(hessian_norms[index]),
            )
        report.to_csv(os.path.join(run_dir, "thickness.csv"))
        record = self._record("thickness", run_dir, model_path, report)
        record.aggregates["model_thickness"] = float(np.mean([e.value for e in estimates]))
        record.save(os.path.join(run_dir, "record.json"))
        logger.info(f"Thickness finished: model-level {record.aggregates['model_thickness']:.6f}")
        logger.info("=" * 80)
        return record


def _table_row(records: List[ExperimentRecord]) -> dict:
    row: Dict[str, object] = {"name": records[0].name, "method": records[0].method}
    for record in records:
        for key, value in record.aggregates.items():
            if key == "precision_at_k":
                row["precision_at_k_pct"] = 100.0 * value
            elif key not in row:
                row[key] = value
    return row


def _scatter_rows(records: List[ExperimentRecord]) -> List[dict]:
    """Per-sample columns joined by sample id across records of one model."""
    merged: Dict[int, dict] = {}
    for record in records:
        for row in record.rows:
            if record.command == "train":
                continue
            target = merged.setdefault(int(row["sample_id"]), {"name": record.name, "sample_id": int(row["sample_id"])})
            for column in SCATTER_COLUMNS:
                if row.get(column) is not None:
                    target[column] = row[column]
    return [merged[key] for key in sorted(merged)]


def _correlations(rows: List[dict]) -> List[dict]:
    results = []
    for a_index, a in enumerate(SCATTER_COLUMNS):
        for b in SCATTER_COLUMNS[a_index + 1 :]:
            pairs = [(row[a], row[b]) for row in rows if a in row and b in row]
            for kind in ("pearson", "spearman"):
                entry = {"x": a, "y": b, "kind": kind, "n": len(pairs), "value": None}
                if len(pairs) >= 3:
                    try:
                        entry["value"] = correlation([p[0] for p in pairs], [p[1] for p in pairs], kind)
                    except UndefinedMetricError as e:
                        logger.warning(f"Correlation {kind}({a}, {b}) undefined: {e.raw_message}")
                results.append(entry)
    return results


def build_report(record_paths: Sequence[str], out_dir: str) -> Dict[str, str]:
    """
    Method x metric table (P@k in percent), per-sample scatter data and the
    Pearson/Spearman block for thickness, Hessian norm and first-flip iteration.
    """
    if not record_paths:
        raise UsageError("report needs at least one record", sys)
    logger.info("=" * 80)
    logger.info(f"REPORT: {len(record_paths)} records")
    records = [ExperimentRecord.load(path) for path in record_paths]
    ks = sorted({record.k for record in records})
    if len(ks) > 1:
        logger.error(f"Records disagree on k: {ks}")
        raise UsageError(f"records were produced with different k values {ks}", sys)

    groups: Dict[str, List[ExperimentRecord]] = {}
    for record in records:
        groups.setdefault(record.name, []).append(record)

    ensure_dir(out_dir)
    table = [_table_row(group) for group in groups.values()]
    scatter = [row for group in groups.values() for row in _scatter_rows(group)]
    outputs = {
        "table": write_csv(os.path.join(out_dir, "table.csv"), table),
        "scatter": write_csv(os.path.join(out_dir, "scatter.csv"), scatter),
    }
    correlations = []
    for name, group in groups.items():
        for entry in _correlations(_scatter_rows(group)):
            correlations.append({"name": name, **entry})
    outputs["correlations"] = write_csv(
        os.path.join(out_dir, "correlations.csv"), correlations, ["name", "x", "y", "kind", "n", "value"]
    )
    write_json(os.path.join(out_dir, "report.json"), {"k": ks[0], "table": table, "correlations": correlations})
    logger.info("=" * 80)
    return outputs
