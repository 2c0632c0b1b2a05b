"""
Search, training, transformation and evaluation workflows.
"""

from workflows.models import ExperimentConfig, load_experiment_config
from workflows.pipeline import COMMANDS, create_run_context, run_command

__all__ = [
    "COMMANDS",
    "ExperimentConfig",
    "create_run_context",
    "load_experiment_config",
    "run_command",
]
