"""
Command-line harness: rankshield train|attack|evaluate|thickness|report.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence
or numeric failure, 4 I/O error.
"""

import argparse
import sys
from dataclasses import replace
from typing import List, Optional

from src.components.network import DenseNet
from src.config.configuration import ExperimentConfig, config_from_dict, load_config
from src.config.constants import EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, EXIT_USAGE
from src.exceptions import (
    EstimationError,
    IngestionError,
    NumericError,
    RankShieldException,
    TrainingDivergenceError,
)
from src.logger import logger
from src.pipelines.experiment_pipeline import ExperimentPipeline, build_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankshield", description="Robust top-k explanation rankings")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, model: bool = True, data: bool = True) -> None:
        sub.add_argument("--config", help="JSON or YAML experiment config")
        sub.add_argument("--out", help="run directory (default runs/<run_id>)")
        sub.add_argument("--seed", type=int, help="override every seed in the config")
        sub.add_argument("--jobs", type=int, help="worker threads for per-sample loops")
        if model:
            sub.add_argument("--model", required=True, help="model JSON written by train")
        if data:
            sub.add_argument("--data", help="CSV of samples in model space (default: the configured test split)")

    common(commands.add_parser("train", help="train a classifier"), model=False, data=False)

    attack = commands.add_parser("attack", help="attack explanations sample by sample")
    common(attack)
    attack.add_argument("--trajectories", action="store_true", help="write per-sample trajectory CSVs")

    evaluate = commands.add_parser("evaluate", help="compute robustness and faithfulness metrics")
    common(evaluate)
    evaluate.add_argument("--metrics", help="comma-separated metric names (overrides the config)")

    thickness = commands.add_parser("thickness", help="estimate top-k ranking thickness")
    common(thickness)
    thickness.add_argument("--k", type=int, help="top-k size (overrides attack.k)")

    report = commands.add_parser("report", help="compare run records")
    report.add_argument("records", nargs="+", help="record.json files or run directories")
    report.add_argument("--out", default="report", help="output directory")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.jobs is not None:
        config = replace(config, jobs=args.jobs)
    return config


def _metrics(raw: Optional[str]) -> Optional[List[str]]:
    if raw is None:
        return None
    return [name.strip() for name in raw.split(",") if name.strip()]


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        outputs = build_report(args.records, args.out)
        for kind, path in outputs.items():
            print(f"{kind}: {path}")
        return EXIT_OK

    config = _config(args)
    pipeline = ExperimentPipeline(config, args.out)
    if args.command == "train":
        record = pipeline.run_train()
        print(f"model: {record.model_path}")
        for key, value in record.aggregates.items():
            print(f"{key}: {value}")
        return EXIT_OK

    model = DenseNet.load(args.model)
    dataset = pipeline.evaluation_data(args.data)
    if args.command == "attack":
        record = pipeline.run_attack(model, dataset, args.model, args.trajectories)
        print(f"mean P@k: {record.aggregates.get('precision_at_k', float('nan')):.4f}")
        print(f"mean first flip: {record.aggregates.get('first_flip_iter', float('nan')):.2f}")
    elif args.command == "evaluate":
        record = pipeline.run_evaluate(model, dataset, _metrics(args.metrics), args.model)
        for key, value in record.aggregates.items():
            print(f"{key}: {value}")
    else:
        record = pipeline.run_thickness(model, dataset, args.k, args.model)
        print(f"model thickness: {record.aggregates['model_thickness']:.6f}")
    return EXIT_OK


def exit_code(error: RankShieldException) -> int:
    if isinstance(error, (TrainingDivergenceError, NumericError, EstimationError)):
        return EXIT_DIVERGENCE
    if isinstance(error, IngestionError):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return run(args)
    except RankShieldException as e:
        code = exit_code(e)
        logger.error(f"{args.command} failed with exit code {code}: {e}")
        print(f"error: {e.raw_message}", file=sys.stderr)
        return code
    except OSError as e:
        logger.error(f"{args.command} failed with an I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
