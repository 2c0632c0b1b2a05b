"""
Report node: gathers whichever artifacts exist and renders tables and plots.
"""

from typing import Any, Dict

from utils.common.artifacts import read_json, read_jsonl, write_json
from utils.common.logger import get_logger
from workflows.nodes.shared import (
    ABLATION_FILE,
    EVAL_FILE,
    REPORT_FILE,
    SEARCH_RESULT_FILE,
    SEARCH_TRACE_FILE,
    TRAIN_HISTORY_FILE,
    TRANSFORM_FILE,
    VERIFY_FILE,
    RunContext,
)
from workflows.reporting import build_report

logger = get_logger(__name__)

_JSON_ARTIFACTS = {
    "search_result": SEARCH_RESULT_FILE,
    "transform": TRANSFORM_FILE,
    "verify": VERIFY_FILE,
    "eval": EVAL_FILE,
    "ablation": ABLATION_FILE,
}
_JSONL_ARTIFACTS = {
    "search_trace": SEARCH_TRACE_FILE,
    "train_history": TRAIN_HISTORY_FILE,
}


def report_node(ctx: RunContext) -> Dict[str, Any]:
    artifacts: Dict[str, Any] = {}
    for key, name in _JSON_ARTIFACTS.items():
        if ctx.path(name).exists():
            artifacts[key] = read_json(ctx.path(name))
    for key, name in _JSONL_ARTIFACTS.items():
        if ctx.path(name).exists():
            artifacts[key] = read_jsonl(ctx.path(name))
    if not artifacts:
        logger.warning(f"No artifacts found in {ctx.output_dir}")
    report = build_report(ctx.output_dir, artifacts, force=ctx.force)
    write_json(ctx.path(REPORT_FILE), report)
    return report
