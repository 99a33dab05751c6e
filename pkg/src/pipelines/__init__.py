"""
Pipelines package for experiment workflows
"""

from src.pipelines.experiment_pipeline import ExperimentPipeline, ExperimentRecord, build_report

__all__ = ["ExperimentPipeline", "ExperimentRecord", "build_report"]
