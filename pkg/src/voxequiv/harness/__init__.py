"""Experiment orchestration and the ``voxequiv`` command line."""

from .config import ConfigError, ExperimentConfig
from .experiments import (run_experiment, run_generation_experiment, run_property_experiment,
                          run_reconstruction_experiment)
from .reporting import ReportBundle, RunManifest, Table, verify_checksums, write_report

__all__ = [
    "ConfigError", "ExperimentConfig", "run_experiment", "run_generation_experiment", "run_property_experiment",
    "run_reconstruction_experiment", "ReportBundle", "RunManifest", "Table", "verify_checksums", "write_report",
]
