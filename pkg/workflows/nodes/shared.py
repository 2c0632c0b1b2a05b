"""
Shared run context, artifact names and checkpoint helpers for the command nodes.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np

from data.load_data import DatasetFile, DatasetSplit, load_dataset, split_dataset
from utils.common.artifacts import read_json, require_artifact, write_json
from utils.common.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from utils.common.logger import get_logger
from utils.nas.latency import LatencyModel, predictor_from_checkpoint
from utils.nas.search_space import Network, Supernet, build_network
from utils.nas.transform import shallow_skeleton
from workflows.models import ExperimentConfig

logger = get_logger(__name__)

DATASET_FILE = "dataset.dwds"
LATENCY_PAIRS_FILE = "latency_pairs.jsonl"
PREDICTOR_FILE = "predictor.ckpt"
SUPERNET_FILE = "supernet.ckpt"
SEARCH_RESULT_FILE = "search_result.json"
SEARCH_TRACE_FILE = "search_trace.jsonl"
NETWORK_FILE = "network.ckpt"
TRAIN_HISTORY_FILE = "train_history.jsonl"
SHALLOW_FILE = "network_shallow.ckpt"
TRANSFORM_FILE = "transform.json"
VERIFY_FILE = "verify.json"
CALIBRATED_FILE = "network_calibrated.ckpt"
EVAL_FILE = "eval.json"
ABLATION_FILE = "ablation.json"
REPORT_FILE = "report.json"
TIMINGS_FILE = "timings.json"
FAILURE_FILE = "failure_dump.json"


@dataclass
class RunContext:
    """Validated config plus command-line switches shared by every node."""

    config: ExperimentConfig
    output_dir: Path
    f64: bool = False
    force: bool = False

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def stamp(self) -> Dict[str, Any]:
        return self.config.stamp()

    def rng(self, *stream: int) -> np.random.Generator:
        """Generator for one named purpose, derived from the run seed."""
        return np.random.default_rng([self.seed, *stream])


# Loaded once per process and output directory
_datasets: Dict[Path, DatasetFile] = {}


def get_dataset(ctx: RunContext) -> DatasetFile:
    path = require_artifact(ctx.path(DATASET_FILE), produced_by="gen-data")
    if path not in _datasets:
        _datasets[path] = load_dataset(path)
    return _datasets[path]


def clear_dataset_cache() -> None:
    _datasets.clear()


def get_split(ctx: RunContext) -> DatasetSplit:
    return split_dataset(get_dataset(ctx), ctx.config.dataset.valid_fraction, ctx.seed)


def check_stamp(ctx: RunContext, artifact: str, config_hash: Optional[str]) -> None:
    """Warn when an input artifact was produced under another config."""
    if config_hash and config_hash != ctx.config.hash:
        logger.warning(f"{artifact} was produced with config {config_hash}, current config is {ctx.config.hash}")


def get_predictor(ctx: RunContext) -> LatencyModel:
    path = require_artifact(ctx.path(PREDICTOR_FILE), produced_by="latency-fit")
    checkpoint = load_checkpoint(path, expected_kind="predictor")
    check_stamp(ctx, PREDICTOR_FILE, checkpoint.meta.get("config_hash"))
    return predictor_from_checkpoint(checkpoint)


def get_search_result(ctx: RunContext) -> Dict[str, Any]:
    result = read_json(ctx.path(SEARCH_RESULT_FILE), produced_by="search")
    check_stamp(ctx, SEARCH_RESULT_FILE, result.get("config_hash"))
    return result


def supernet_checkpoint(ctx: RunContext, supernet: Supernet, meta: Dict[str, Any]) -> Checkpoint:
    tensors = supernet.state_dict()
    tensors["arch.alpha"] = supernet.arch.alpha.data.astype(np.float32)
    return Checkpoint(kind="supernet", tensors=tensors, config=ctx.config.to_dict(), meta={**meta, **ctx.stamp})


def network_checkpoint(ctx: RunContext, net: Network, meta: Optional[Dict[str, Any]] = None,
                       calibrated_stats: Optional[Dict[str, Any]] = None) -> Checkpoint:
    header = {"arch": list(net.arch), **(meta or {}), **ctx.stamp}
    return Checkpoint(kind="network", tensors=net.state_dict(), config=ctx.config.to_dict(), meta=header,
                      calibrated_stats=calibrated_stats, transformed=net.transformed)


def load_network(ctx: RunContext, name: str, produced_by: str) -> Tuple[Network, Checkpoint]:
    """Rebuild a deep or transformed network from its checkpoint."""
    path = require_artifact(ctx.path(name), produced_by=produced_by)
    checkpoint = load_checkpoint(path, expected_kind="network")
    check_stamp(ctx, name, checkpoint.meta.get("config_hash"))
    arch = checkpoint.meta["arch"]
    if checkpoint.transformed:
        net = shallow_skeleton(ctx.config.supernet, arch, rng=None)
    else:
        net = build_network(ctx.config.supernet, arch, rng=None)
    net.load_state_dict(checkpoint.tensors)
    net.eval()
    return net, checkpoint


def save_network(ctx: RunContext, name: str, net: Network, meta: Optional[Dict[str, Any]] = None,
                 calibrated_stats: Optional[Dict[str, Any]] = None) -> Path:
    path = save_checkpoint(ctx.path(name), network_checkpoint(ctx, net, meta, calibrated_stats))
    logger.info(f"Saved {path}")
    return path


def write_summary(ctx: RunContext, command: str, summary: Dict[str, Any]) -> Path:
    return write_json(ctx.path(f"{command.replace('-', '_')}_summary.json"), {"command": command, **summary,
                                                                           **ctx.stamp})


def record_timing(ctx: RunContext, key: str, seconds: float) -> None:
    """Merge one wall-clock entry into timings.json (excluded from determinism)."""
    path = ctx.path(TIMINGS_FILE)
    timings = read_json(path) if path.exists() else {}
    timings[key] = round(float(seconds), 3)
    write_json(path, timings)


@contextmanager
def timed(ctx: RunContext, key: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        record_timing(ctx, key, time.perf_counter() - start)
