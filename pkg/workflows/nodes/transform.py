"""
Transformation and equivalence verification nodes.
"""

from typing import Any, Dict

import numpy as np

from utils.common.artifacts import write_json
from utils.common.logger import get_logger
from utils.nas.latency import synthetic_oracle
from utils.nas.transform import depth_report, transform_network, verify_equivalence
from workflows.nodes.shared import NETWORK_FILE, SHALLOW_FILE, TRANSFORM_FILE, VERIFY_FILE, RunContext, load_network, save_network

logger = get_logger(__name__)


def transform_node(ctx: RunContext) -> Dict[str, Any]:
    """Collapse the trained network and record depth and latency before and after."""
    deep, _ = load_network(ctx, NETWORK_FILE, produced_by="train")
    shallow = transform_network(deep)
    oracle = ctx.config.latency_oracle.noiseless()
    before = synthetic_oracle(deep, oracle)
    after = synthetic_oracle(shallow, oracle)
    report = {
        "arch": list(deep.arch),
        **depth_report(deep, shallow).to_dict(),
        "latency_before_ms": before,
        "latency_after_ms": after,
        "speedup": before / after,
    }
    save_network(ctx, SHALLOW_FILE, shallow)
    write_json(ctx.path(TRANSFORM_FILE), {**report, **ctx.stamp})
    logger.info(
        f"Depth {report['depth_before']} -> {report['depth_after']}, "
        f"latency {before:.3f} -> {after:.3f} ms ({report['speedup']:.2f}x)"
    )
    return report


def verify_node(ctx: RunContext) -> Dict[str, Any]:
    """
    Compare deep and shallow logits on random inputs.

    In f64 mode the deep weights are promoted and the transformation is
    recomputed, then checked against the tighter tolerance.
    """
    vcfg = ctx.config.verify
    deep, _ = load_network(ctx, NETWORK_FILE, produced_by="train")
    if ctx.f64:
        deep.astype(np.float64)
        shallow = transform_network(deep)
        tol = vcfg.tol_f64
    else:
        shallow, _ = load_network(ctx, SHALLOW_FILE, produced_by="transform")
        tol = vcfg.tol
    report = verify_equivalence(deep, shallow, n_samples=vcfg.n_samples, tol=tol, rng=ctx.rng(9))
    report["dtype"] = "float64" if ctx.f64 else "float32"
    write_json(ctx.path(VERIFY_FILE), {**report, **ctx.stamp})
    logger.info(f"Equivalence max_abs={report['max_abs']:.3e} (tol {tol:.1e}), passed={report['passed']}")
    return report
