"""Orchestration - configuration, stage checkpoints and the dataset pipeline."""

from syndy.orchestration.config import PipelineConfig, load_config, validate_config
from syndy.orchestration.pipeline import PipelineRunner, RunReport, run_pipeline
from syndy.orchestration.stage_cache import StageCache

__all__ = [
    "PipelineConfig",
    "PipelineRunner",
    "RunReport",
    "StageCache",
    "load_config",
    "run_pipeline",
    "validate_config",
]
