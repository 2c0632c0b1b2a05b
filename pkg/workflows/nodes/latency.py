"""
Latency pair generation and predictor fitting node.
"""

from typing import Any, Dict

from utils.common.checkpoint import save_checkpoint
from utils.common.config import get_runtime_settings
from utils.common.logger import get_logger
from utils.nas.latency import (
    fit_predictor,
    generate_pairs,
    latency_range,
    learning_curve,
    predictor_to_checkpoint,
    save_latency_pairs,
)
from utils.nas.search_space import NUM_OPERATORS
from workflows.nodes.shared import LATENCY_PAIRS_FILE, PREDICTOR_FILE, RunContext

logger = get_logger(__name__)


def latency_fit_node(ctx: RunContext) -> Dict[str, Any]:
    """
    Measure random architectures on the synthetic oracle and fit the predictor.

    Writes latency_pairs.jsonl and predictor.ckpt.
    """
    cfg = ctx.config
    pcfg = cfg.latency_predictor
    num_layers = cfg.supernet.num_layers
    pairs = generate_pairs(cfg.supernet, pcfg.n_pairs, cfg.latency_oracle, ctx.seed,
                           threads=get_runtime_settings().threads)
    save_latency_pairs(ctx.path(LATENCY_PAIRS_FILE), pairs, ctx.stamp)

    model, report = fit_predictor(
        pairs,
        num_layers,
        NUM_OPERATORS,
        train_fraction=pcfg.train_fraction,
        epochs=pcfg.epochs,
        batch_size=pcfg.batch_size,
        lr=pcfg.lr,
        hidden=pcfg.hidden,
        rng=ctx.rng(8),
    )
    save_checkpoint(ctx.path(PREDICTOR_FILE),
                    predictor_to_checkpoint(model, cfg.to_dict(), {**report.to_dict(), **ctx.stamp}))
    low, high = latency_range(cfg.supernet, cfg.latency_oracle)
    summary = {"predictor": report.to_dict(), "latency_range_ms": [low, high], "n_pairs": len(pairs)}
    if pcfg.learning_curve:
        summary["learning_curve"] = learning_curve(
            pairs, pcfg.learning_curve, num_layers, NUM_OPERATORS,
            train_fraction=pcfg.train_fraction, epochs=pcfg.epochs, batch_size=pcfg.batch_size,
            lr=pcfg.lr, hidden=pcfg.hidden, seed=ctx.seed,
        )
    return summary
