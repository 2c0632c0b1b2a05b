"""
Architecture search node.
"""

from typing import Any, Dict, Optional

from utils.common.artifacts import write_json, write_jsonl
from utils.common.checkpoint import save_checkpoint
from utils.common.logger import get_logger
from workflows.nodes.shared import (
    SEARCH_RESULT_FILE,
    SEARCH_TRACE_FILE,
    SUPERNET_FILE,
    RunContext,
    get_predictor,
    get_split,
    supernet_checkpoint,
)
from workflows.search import run_search

logger = get_logger(__name__)


def search_node(ctx: RunContext, constraint_ms: Optional[float] = None) -> Dict[str, Any]:
    """Run the latency-constrained search; writes the result, trace and supernet."""
    split = get_split(ctx)
    predictor = get_predictor(ctx)
    result, supernet = run_search(ctx.config, split, predictor, constraint_ms=constraint_ms)

    write_json(ctx.path(SEARCH_RESULT_FILE), {**result.to_dict(), **ctx.stamp})
    write_jsonl(ctx.path(SEARCH_TRACE_FILE), (record.to_record() for record in result.trace), ctx.stamp)
    save_checkpoint(ctx.path(SUPERNET_FILE), supernet_checkpoint(ctx, supernet, {
        "lambda": result.lam,
        "constraint_ms": result.constraint_ms,
        "iterations": len(result.trace),
    }))
    if not result.reachable:
        logger.warning("Constraint was outside the reachable latency range")
    return {
        "arch": result.arch,
        "constraint_ms": result.constraint_ms,
        "oracle_latency_ms": result.oracle_latency_ms,
        "predicted_latency_ms": result.predicted_latency_ms,
        "latency_error": result.latency_error,
        "lambda": result.lam,
        "coverage": result.coverage,
        "reachable": result.reachable,
    }
