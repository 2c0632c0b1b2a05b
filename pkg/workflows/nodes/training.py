"""
Stand-alone training node for the searched architecture.
"""

from typing import Any, Dict

from utils.common.artifacts import write_jsonl
from utils.common.logger import get_logger
from utils.nas.search_space import build_network
from workflows.elastic import train_elastic
from workflows.nodes.shared import NETWORK_FILE, TRAIN_HISTORY_FILE, RunContext, get_search_result, get_split, save_network
from workflows.training import train_hybrid_transformable, train_standard

logger = get_logger(__name__)


def train_node(ctx: RunContext) -> Dict[str, Any]:
    """
    Train the searched architecture from a fresh initialisation.

    Hybrid transformable training is used when enabled (and the architecture
    has linear operators); multi-resolution elastic training when enabled.
    """
    cfg = ctx.config
    arch = get_search_result(ctx)["arch"]
    split = get_split(ctx)
    net = build_network(cfg.supernet, arch, ctx.rng(5))
    rng = ctx.rng(6)
    if cfg.train.elastic:
        result = train_elastic(net, split, cfg.train, cfg.elastic, rng, hybrid=cfg.train.hybrid)
    elif cfg.train.hybrid:
        result = train_hybrid_transformable(net, split, cfg.train, rng)
    else:
        result = train_standard(net, split, cfg.train, rng)

    write_jsonl(ctx.path(TRAIN_HISTORY_FILE), (m.to_record() for m in result.history), ctx.stamp)
    save_network(ctx, NETWORK_FILE, net, {"hybrid": result.hybrid, "elastic": result.elastic})
    return {
        "arch": list(arch),
        "epochs": len(result.history),
        "final_val_acc": result.final_val_acc,
        "hybrid": result.hybrid,
        "elastic": result.elastic,
        "linear_operators": len(net.linear_operators()),
    }
