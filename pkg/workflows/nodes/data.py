"""
Dataset generation node.
"""

from typing import Any, Dict

import numpy as np

from data.generate_synthetic_data import synth_dataset
from data.load_data import save_dataset
from utils.common.logger import get_logger
from workflows.nodes.shared import DATASET_FILE, RunContext, clear_dataset_cache

logger = get_logger(__name__)


def gen_data_node(ctx: RunContext) -> Dict[str, Any]:
    """Generate the synthetic dataset into the output directory."""
    ds_cfg = ctx.config.dataset
    dataset = synth_dataset(
        seed=ctx.seed,
        classes=ds_cfg.classes,
        count=ds_cfg.count,
        channels=ds_cfg.channels,
        height=ds_cfg.height,
        width=ds_cfg.width,
        noise=ds_cfg.noise,
    )
    path = save_dataset(ctx.path(DATASET_FILE), dataset)
    clear_dataset_cache()
    counts = np.bincount(dataset.labels, minlength=dataset.classes)
    logger.info(f"Wrote {dataset.count} images of shape {dataset.image_shape} to {path}")
    return {
        "path": str(path),
        "count": dataset.count,
        "image_shape": list(dataset.image_shape),
        "classes": dataset.classes,
        "class_counts": counts.tolist(),
    }
