"""Experiment registry, configuration, reporting and the command line."""

from .config import ExperimentConfig, default_config, from_dict, load_config
from .experiments import REGISTRY, run_experiment
from .report import Row, RunReport, decide
from .study import StudyResult, convergence_study

__all__ = [
    "REGISTRY", "ExperimentConfig", "Row", "RunReport", "StudyResult", "convergence_study", "decide",
    "default_config", "from_dict", "load_config", "run_experiment",
]
