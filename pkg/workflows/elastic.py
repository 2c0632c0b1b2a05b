"""
Arbitrary-resolution elastic training and post-training BN calibration.

One set of batch-norm layers is shared by every resolution during training.
After training, exact per-resolution statistics are computed once and swapped
in at inference time.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Any, Dict, List, Optional

import numpy as np

from data.load_data import DatasetFile, DatasetSplit
from utils.common.config import get_runtime_settings
from utils.common.errors import ConfigError, NumericalError, ShapeMismatchError
from utils.common.logger import get_logger
from utils.nas import tensor as T
from utils.nas.latency import OracleParams, synthetic_oracle
from utils.nas.layers import Module, Sequential, clip_gradients
from utils.nas.optim import SGD
from utils.nas.search_space import Network, SupernetConfig
from utils.nas.transform import transform_network
from workflows.models import ElasticConfig, TrainConfig
from workflows.state import TrainResult
from workflows.training import fit_network, predict_logits

logger = get_logger(__name__)

RESOLUTION_ALIGNMENT = 8


@dataclass(frozen=True)
class ResolutionGrid:
    """Input sides r_min, r_min + step, ..., r_max."""

    r_min: int
    r_max: int
    step: int

    def __post_init__(self):
        for name in ("r_min", "r_max", "step"):
            value = getattr(self, name)
            if value <= 0 or value % RESOLUTION_ALIGNMENT:
                raise ConfigError(f"elastic.{name}={value} must be a positive multiple of {RESOLUTION_ALIGNMENT}",
                                  key=f"elastic.{name}")
        if self.r_min > self.r_max:
            raise ConfigError(f"elastic.r_min={self.r_min} exceeds r_max={self.r_max}", key="elastic.r_min")
        if (self.r_max - self.r_min) % self.step:
            raise ConfigError(f"r_max - r_min = {self.r_max - self.r_min} is not a multiple of step {self.step}",
                              key="elastic.step")

    @classmethod
    def from_config(cls, cfg: ElasticConfig, supernet: Optional[SupernetConfig] = None) -> "ResolutionGrid":
        grid = cls(cfg.r_min, cfg.r_max, cfg.step)
        if supernet is not None and grid.r_min < supernet.min_resolution:
            raise ConfigError(
                f"elastic.r_min={grid.r_min} is below the smallest admissible input {supernet.min_resolution}",
                key="elastic.r_min",
            )
        return grid

    @property
    def resolutions(self) -> List[int]:
        return list(range(self.r_min, self.r_max + 1, self.step))

    def __len__(self) -> int:
        return (self.r_max - self.r_min) // self.step + 1

    def sandwich(self, rng: np.random.Generator) -> List[int]:
        """Largest, one uniformly random middle, and smallest resolution."""
        sizes = self.resolutions
        if len(sizes) < 3:
            return sorted(sizes, reverse=True)
        middle = sizes[1 + int(rng.integers(0, len(sizes) - 2))]
        return [self.r_max, middle, self.r_min]


def _interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] bilinear weights with half-pixel centres."""
    centres = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    centres = np.clip(centres, 0.0, src - 1)
    lo = np.floor(centres).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = centres - lo
    weights = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def resize_bilinear(x: np.ndarray, r: int) -> np.ndarray:
    """
    Downscale square images [N, C, H, H] to [N, C, r, r].

    Raises:
        ShapeMismatchError: Non-square input, r <= 0 or r > H
    """
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ShapeMismatchError("resize_bilinear", ["H", "W"], "square", x.shape[2:])
    size = x.shape[2]
    if r <= 0 or r > size:
        raise ShapeMismatchError("resize_bilinear", ["r"], f"1..{size}", r)
    if r == size:
        return x.copy()
    m = _interpolation_matrix(size, r)
    out = np.einsum("ih,nchw,jw->ncij", m, x.astype(np.float64), m, optimize=True)
    return out.astype(x.dtype)


def elastic_step(
    model: Module,
    images: np.ndarray,
    labels: np.ndarray,
    optimizer: SGD,
    lr: float,
    grid: ResolutionGrid,
    rng: np.random.Generator,
    distill: bool = True,
    full_grid: bool = False,
    grad_clip: float = 0.0,
) -> float:
    """
    One multi-resolution update.

    The largest resolution sees the labels; every smaller sampled resolution
    is distilled from its (detached) logits, or trained on the labels when
    ``distill`` is off. Smaller-resolution losses are averaged.
    """
    sizes = sorted(grid.resolutions, reverse=True) if full_grid else grid.sandwich(rng)
    model.zero_grad()
    logits = model(resize_bilinear(images, sizes[0]))
    total, dlogits = T.softmax_cross_entropy(logits, labels)
    model.backward(dlogits)
    target = logits.copy()

    smaller = sizes[1:]
    for r in smaller:
        student = model(resize_bilinear(images, r))
        if distill:
            loss, dstudent = T.kl_divergence(student, target)
        else:
            loss, dstudent = T.softmax_cross_entropy(student, labels)
        weight = 1.0 / len(smaller)
        model.backward(dstudent * weight)
        total += weight * loss
    if not np.isfinite(total):
        raise NumericalError("non-finite elastic training loss", context={"resolutions": sizes, "lr": lr})
    if grad_clip > 0:
        clip_gradients(model.parameters(), grad_clip)
    optimizer.step(lr=lr)
    model.zero_grad()
    return float(total)


def train_elastic(
    model: Module,
    split: DatasetSplit,
    train_cfg: TrainConfig,
    elastic_cfg: ElasticConfig,
    rng: np.random.Generator,
    hybrid: bool = False,
    max_steps_per_epoch: Optional[int] = None,
    label: str = "elastic",
) -> TrainResult:
    """Train with the resolution sandwich (or the full grid) on every step."""
    grid = ResolutionGrid(elastic_cfg.r_min, elastic_cfg.r_max, elastic_cfg.step)
    if len(grid) < 3:
        logger.warning(f"Resolution grid {grid.resolutions} has fewer than 3 sizes; using all of them each step")
    step = partial(elastic_step, grid=grid, rng=rng, distill=elastic_cfg.distill,
                   full_grid=elastic_cfg.full_grid, grad_clip=train_cfg.grad_clip)
    if hybrid and isinstance(model, Network) and not model.linear_operators():
        logger.warning("Architecture has no linear operators; hybrid training falls back to standard training")
        hybrid = False
    return fit_network(model, split, train_cfg, rng, hybrid=hybrid, step_fn=step,
                       max_steps_per_epoch=max_steps_per_epoch, label=label)


@dataclass
class CalibratedStats:
    """Per-resolution batch-norm statistics: resolution -> layer -> {"mean", "var"}."""

    stats: Dict[int, Dict[str, Dict[str, np.ndarray]]]

    @property
    def resolutions(self) -> List[int]:
        return sorted(self.stats)

    def for_resolution(self, r: int) -> Dict[str, Dict[str, np.ndarray]]:
        if r not in self.stats:
            raise ConfigError(f"no calibrated statistics for resolution {r}; available {self.resolutions}")
        return self.stats[r]

    def to_jsonable(self) -> Dict[str, Any]:
        return {
            str(r): {
                name: {"mean": [float(v) for v in entry["mean"]], "var": [float(v) for v in entry["var"]]}
                for name, entry in sorted(layers.items())
            }
            for r, layers in sorted(self.stats.items())
        }

    @classmethod
    def from_jsonable(cls, data: Dict[str, Any]) -> "CalibratedStats":
        return cls({
            int(r): {
                name: {"mean": np.asarray(entry["mean"], dtype=np.float32),
                       "var": np.asarray(entry["var"], dtype=np.float32)}
                for name, entry in layers.items()
            }
            for r, layers in data.items()
        })


def _stages(net: Module) -> List[Module]:
    if isinstance(net, Network):
        return [net.stem, *net.layers, net.head]
    if isinstance(net, Sequential):
        return list(net.blocks)
    return [net]


def _chunked(stage: Module, x: np.ndarray, batch_size: int) -> np.ndarray:
    outputs = []
    for start in range(0, len(x), batch_size):
        outputs.append(stage.forward(x[start:start + batch_size]))
        stage.release_caches()
    return np.concatenate(outputs, axis=0)


def _calibrate_one(replica: Module, r: int, images: np.ndarray,
                   batch_size: int) -> Dict[str, Dict[str, np.ndarray]]:
    replica.eval()
    x = resize_bilinear(images, r)
    if len(x) <= batch_size:
        replica.set_bn_mode("calibrate")
        replica.forward(x)
        replica.release_caches()
        return replica.bn_statistics()
    # Chunked: within a stage each BN accumulates over all chunks while the
    # ones before it already normalise with their final population statistics.
    stages = _stages(replica)
    for index, stage in enumerate(stages):
        for _, bn in stage.batch_norms():
            bn.set_mode("accumulate")
            _chunked(stage, x, batch_size)
            bn.finish_accumulation()
        if index < len(stages) - 1:
            x = _chunked(stage, x, batch_size)
    return replica.bn_statistics()


def calibrate_bn(net: Module, dataset: DatasetFile, grid: ResolutionGrid, n_calib: int,
                 batch_size: int = 256) -> CalibratedStats:
    """
    Exact per-resolution BN statistics over the first ``n_calib`` images.

    Each resolution works on a copy of the network, so the trained parameters
    and running statistics of ``net`` are left untouched. Up to ``batch_size``
    images run as one batch; larger sets are streamed in chunks of that size
    and the per-channel moments are merged, giving the same statistics as a
    single full batch.
    """
    if batch_size < 2:
        raise ConfigError(f"calibration batch size must be at least 2, got {batch_size}")
    if n_calib > dataset.count:
        logger.warning(f"n_calib={n_calib} exceeds the {dataset.count} available images; using all of them")
        n_calib = dataset.count
    images = dataset.images[:n_calib]
    replicas = [net.clone() for _ in grid.resolutions]
    workers = max(1, min(get_runtime_settings().threads, len(grid)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(partial(_calibrate_one, images=images, batch_size=batch_size),
                                replicas, grid.resolutions))
    logger.info(f"Calibrated BN statistics at resolutions {grid.resolutions} on {n_calib} images")
    return CalibratedStats(dict(zip(grid.resolutions, results)))


def with_statistics(net: Module, stats: Optional[CalibratedStats], r: int) -> Module:
    """Copy of ``net`` carrying the statistics calibrated for resolution ``r``."""
    clone = net.clone()
    if stats is not None:
        clone.load_bn_statistics(stats.for_resolution(r))
    return clone


def evaluate_at_resolution(net: Module, dataset: DatasetFile, r: int,
                           stats: Optional[CalibratedStats] = None, batch_size: int = 256) -> float:
    """Inference accuracy on images resized to ``r``, with calibrated statistics when given."""
    model = with_statistics(net, stats, r) if stats is not None else net
    logits = predict_logits(model, resize_bilinear(dataset.images, r), batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def resolution_report(net: Network, dataset: DatasetFile, grid: ResolutionGrid,
                      stats: Optional[CalibratedStats], oracle: OracleParams) -> List[Dict[str, Any]]:
    """
    Per-resolution accuracy of the shallow network, calibrated and not, plus
    its noiseless oracle latency at that input size.
    """
    rows = []
    noiseless = oracle.noiseless()
    plain = transform_network(net)
    for r in grid.resolutions:
        row = {
            "resolution": r,
            "acc_uncalibrated": evaluate_at_resolution(plain, dataset, r),
            "oracle_latency_ms": synthetic_oracle(plain, noiseless, resolution=r),
        }
        if stats is not None:
            shallow = transform_network(with_statistics(net, stats, r))
            row["acc_calibrated"] = evaluate_at_resolution(shallow, dataset, r)
        rows.append(row)
        logger.info(
            f"r={r}: acc={row.get('acc_calibrated', row['acc_uncalibrated']):.4f} "
            f"(uncalibrated {row['acc_uncalibrated']:.4f}), latency {row['oracle_latency_ms']:.3f} ms"
        )
    return rows
