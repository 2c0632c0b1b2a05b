"""
Batch-norm calibration and per-resolution evaluation nodes.
"""

from typing import Any, Dict

import numpy as np

from utils.common.artifacts import write_json
from utils.common.logger import get_logger
from workflows.elastic import CalibratedStats, ResolutionGrid, calibrate_bn, resolution_report
from workflows.nodes.shared import CALIBRATED_FILE, EVAL_FILE, NETWORK_FILE, RunContext, get_split, load_network, save_network

logger = get_logger(__name__)


def _max_relative_shift(before: Dict[str, Dict[str, np.ndarray]], after: Dict[str, Dict[str, np.ndarray]]) -> float:
    shifts = []
    for name, entry in before.items():
        for key in ("mean", "var"):
            old = np.asarray(entry[key], dtype=np.float64)
            new = np.asarray(after[name][key], dtype=np.float64)
            shifts.append(float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-12)))
    return max(shifts) if shifts else 0.0


def calibrate_node(ctx: RunContext) -> Dict[str, Any]:
    """Compute per-resolution BN statistics of the trained deep network."""
    cfg = ctx.config
    net, _ = load_network(ctx, NETWORK_FILE, produced_by="train")
    grid = ResolutionGrid.from_config(cfg.elastic, cfg.supernet)
    stats = calibrate_bn(net, get_split(ctx).train, grid, cfg.elastic.n_calib, cfg.elastic.calib_batch)
    save_network(ctx, CALIBRATED_FILE, net, {"resolutions": grid.resolutions}, stats.to_jsonable())
    return {
        "resolutions": grid.resolutions,
        "n_calib": cfg.elastic.n_calib,
        "max_relative_shift_at_r_max": _max_relative_shift(net.bn_statistics(), stats.for_resolution(grid.r_max)),
    }


def eval_node(ctx: RunContext) -> Dict[str, Any]:
    """
    Accuracy and noiseless oracle latency of the shallow network at every
    grid resolution, with and without calibrated statistics.
    """
    cfg = ctx.config
    grid = ResolutionGrid.from_config(cfg.elastic, cfg.supernet)
    stats = None
    if cfg.elastic.calibrate and ctx.path(CALIBRATED_FILE).exists():
        net, checkpoint = load_network(ctx, CALIBRATED_FILE, produced_by="calibrate")
        if checkpoint.calibrated_stats:
            stats = CalibratedStats.from_jsonable(checkpoint.calibrated_stats)
    else:
        if cfg.elastic.calibrate:
            logger.warning(f"{CALIBRATED_FILE} not found; evaluating with training running statistics")
        net, _ = load_network(ctx, NETWORK_FILE, produced_by="train")
    rows = resolution_report(net, get_split(ctx).valid, grid, stats, cfg.latency_oracle)
    write_json(ctx.path(EVAL_FILE), {"resolutions": rows, "calibrated": stats is not None, **ctx.stamp})
    return {"resolutions": rows, "calibrated": stats is not None}
