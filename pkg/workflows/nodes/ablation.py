"""
Ablation node.
"""

from typing import Any, Dict

from utils.common.artifacts import write_json
from utils.common.logger import get_logger
from workflows.ablation import run_ablation
from workflows.nodes.shared import ABLATION_FILE, SEARCH_RESULT_FILE, RunContext, get_predictor, get_search_result, get_split, record_timing

logger = get_logger(__name__)

_NEEDS_PREDICTOR = {"strategies", "lambda"}


def ablate_node(ctx: RunContext) -> Dict[str, Any]:
    """Run the configured studies on the searched architecture (or a default one)."""
    cfg = ctx.config
    studies = cfg.ablation.studies
    predictor = get_predictor(ctx) if _NEEDS_PREDICTOR & set(studies) else None
    arch = get_search_result(ctx)["arch"] if ctx.path(SEARCH_RESULT_FILE).exists() else None
    if arch is None:
        logger.info("No search result found; ablations use the default architecture")
    results, timings = run_ablation(cfg, get_split(ctx), predictor, arch, studies)
    write_json(ctx.path(ABLATION_FILE), {"studies": results, **ctx.stamp})
    for key, seconds in timings.items():
        record_timing(ctx, f"ablate/{key}", seconds)
    return {"studies": {study: body["summary"] for study, body in results.items()}}
