"""Configuration, dataset ingestion, experiment runs and the command line."""

from .compare import ComparisonRow, compare
from .config import EXPERIMENT_KINDS, ConfigError, DatasetSource, ExperimentConfig, load_experiment, load_training
from .experiments import ExperimentError, RunManifest, run
from .io import DatasetError, load_dataset, load_directory, save_directory

__all__ = [
    "EXPERIMENT_KINDS",
    "ComparisonRow",
    "ConfigError",
    "DatasetError",
    "DatasetSource",
    "ExperimentConfig",
    "ExperimentError",
    "RunManifest",
    "compare",
    "load_dataset",
    "load_directory",
    "load_experiment",
    "load_training",
    "run",
    "save_directory",
]
