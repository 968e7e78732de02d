"""Experiment orchestration: config, datasets, runs, comparisons."""
from __future__ import annotations

from .compare import Comparison, ShapeMismatch, compare_runs
from .config import ConfigError, DatasetSpec, ScenarioConfig, config_from_dict, load_config
from .data import DatasetSplit, EmptyShard, RankError, SchemaError, load_dataset, pca_reduce
from .experiment import MetricsReport, run_experiment, simulate_access

__all__ = [
    "Comparison",
    "ConfigError",
    "DatasetSpec",
    "DatasetSplit",
    "EmptyShard",
    "MetricsReport",
    "RankError",
    "ScenarioConfig",
    "SchemaError",
    "ShapeMismatch",
    "compare_runs",
    "config_from_dict",
    "load_config",
    "load_dataset",
    "pca_reduce",
    "run_experiment",
    "simulate_access",
]
