"""
Command registry for the transformable NAS pipeline.

Every command is a node that reads its inputs from the output directory and
writes its artifacts back there, so stages can be run one at a time.
"""

from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

from utils.common.artifacts import write_json
from utils.common.errors import ConfigError, NumericalError
from utils.common.logger import get_logger
from workflows.models import ExperimentConfig, load_experiment_config
from workflows.nodes import (
    RunContext,
    ablate_node,
    calibrate_node,
    eval_node,
    gen_data_node,
    latency_fit_node,
    report_node,
    search_node,
    train_node,
    transform_node,
    verify_node,
)
from workflows.nodes.shared import FAILURE_FILE, timed, write_summary

logger = get_logger(__name__)

Node = Callable[[RunContext], Dict[str, Any]]

COMMANDS: Dict[str, Node] = {
    "gen-data": gen_data_node,
    "latency-fit": latency_fit_node,
    "search": search_node,
    "train": train_node,
    "transform": transform_node,
    "verify": verify_node,
    "calibrate": calibrate_node,
    "eval": eval_node,
    "ablate": ablate_node,
    "report": report_node,
}


def create_run_context(
    config_path: Union[str, Path],
    seed: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
    constraint_ms: Optional[float] = None,
    f64: bool = False,
    force: bool = False,
) -> RunContext:
    """
    Load the experiment config with command-line overrides applied.

    Args:
        config_path: JSON experiment config
        seed: Overrides ``seed``
        output_dir: Overrides ``output_dir``
        constraint_ms: Overrides ``search.constraint_ms``
        f64: Verify in double precision
        force: Accept artifacts produced under another config

    Returns:
        RunContext with the output directory created
    """
    overrides = {
        "seed": seed,
        "output_dir": str(output_dir) if output_dir is not None else None,
        "search.constraint_ms": constraint_ms,
    }
    config: ExperimentConfig = load_experiment_config(config_path, overrides)
    ctx = RunContext(config=config, output_dir=Path(config.output_dir), f64=f64, force=force)
    ctx.output_dir.mkdir(parents=True, exist_ok=True)
    return ctx


def _write_failure_dump(ctx: RunContext, command: str, exc: NumericalError) -> Path:
    path = write_json(ctx.path(FAILURE_FILE), {"command": command, "error": str(exc), "context": exc.context,
                                               **ctx.stamp})
    logger.error(f"Numerical failure in '{command}'; context written to {path}")
    return path


def run_command(ctx: RunContext, command: str) -> Dict[str, Any]:
    """
    Run one pipeline command and write its summary.

    Raises:
        ConfigError: Unknown command
        NumericalError: After writing failure_dump.json
    """
    node = COMMANDS.get(command)
    if node is None:
        raise ConfigError(f"Unknown command '{command}'; expected one of {sorted(COMMANDS)}", key="command")

    logger.info(f"Running '{command}' (seed={ctx.seed}, config={ctx.config.hash}, out={ctx.output_dir})")
    try:
        with timed(ctx, command):
            summary = node(ctx)
    except NumericalError as e:
        _write_failure_dump(ctx, command, e)
        raise
    write_summary(ctx, command, summary)
    logger.info(f"'{command}' finished")
    return summary
