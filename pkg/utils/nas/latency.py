"""
Synthetic latency oracle, architecture-latency pair generation and the MLP
latency predictor.

The oracle charges every convolution or FC layer a fixed overhead plus a
sub-linear MAC term, so depth dominates at desk scale:

    latency = sum_layers (c0 + c1 * (MACs / 1e6) ** gamma) + noise

MACs of a convolution are C_in * C_out * K^2 * H' * W' / groups. The 1x1
expansion of an MBConv operator is counted on the unpadded input grid.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from utils.common.artifacts import read_jsonl, write_jsonl
from utils.common.checkpoint import Checkpoint
from utils.common.errors import DataFormatError, InsufficientDataError
from utils.common.logger import get_logger
from utils.nas.layers import ConvBNAct, Linear, Module, ReLU, Sequential
from utils.nas.optim import Adam
from utils.nas.search_space import (
    NUM_OPERATORS,
    LayerSpec,
    MBConvOperator,
    Network,
    OperatorSpec,
    SupernetConfig,
    build_network,
    indices_to_onehot,
    operator_space,
)
from utils.nas.tensor import Tensor
from utils.nas.transform import transform_network

logger = get_logger(__name__)

MIN_PAIRS = 50


class OracleParams(BaseModel):
    """Cost model of the synthetic device (milliseconds)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    c0: float = Field(default=0.6, ge=0)
    c1: float = Field(default=0.5, gt=0)
    gamma: float = Field(default=0.8, gt=0, le=1.5)
    sigma: float = Field(default=0.01, ge=0)

    def noiseless(self) -> "OracleParams":
        return self.model_copy(update={"sigma": 0.0})


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int

    def latency(self, params: OracleParams) -> float:
        return params.c0 + params.c1 * (self.macs / 1e6) ** params.gamma


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def mbconv_costs(c_in: int, c_out: int, hidden: int, kernel: int, stride: int, size: int,
                 prefix: str = "op") -> Tuple[List[LayerCost], int]:
    """Costs of the three convolutions of an untransformed operator."""
    out = _out_size(size, kernel, stride, (kernel - 1) // 2)
    return [
        LayerCost(f"{prefix}.expand", c_in * hidden * size * size),
        LayerCost(f"{prefix}.depthwise", hidden * kernel * kernel * out * out),
        LayerCost(f"{prefix}.project", hidden * c_out * out * out),
    ], out


def collapsed_costs(c_in: int, c_out: int, kernel: int, stride: int, size: int,
                    prefix: str = "op") -> Tuple[List[LayerCost], int]:
    out = _out_size(size, kernel, stride, (kernel - 1) // 2)
    return [LayerCost(f"{prefix}.conv", c_in * c_out * kernel * kernel * out * out)], out


def operator_costs(layer: LayerSpec, spec: OperatorSpec, size: int, transformed: bool = True,
                   prefix: str = "op") -> Tuple[List[LayerCost], int]:
    """Layer costs of one operator choice; linear operators collapse when ``transformed``."""
    if transformed and spec.linear:
        return collapsed_costs(layer.c_in, layer.c_out, spec.kernel, layer.stride, size, prefix)
    return mbconv_costs(layer.c_in, layer.c_out, spec.expansion * layer.c_in, spec.kernel, layer.stride,
                        size, prefix)


def _conv_cost(block: ConvBNAct, size: int, name: str) -> Tuple[LayerCost, int]:
    weights = block.conv.weights
    out = weights.output_size(size)
    macs = weights.in_channels * weights.out_channels * weights.kernel_size ** 2 * out * out // weights.groups
    return LayerCost(name, macs), out


def network_layer_costs(net: Network, resolution: Optional[int] = None) -> List[LayerCost]:
    """Per-layer MAC counts of a network (deep or transformed) at an input size."""
    size = resolution or net.cfg.input_shape[1]
    stem, size = _conv_cost(net.stem, size, "stem")
    costs = [stem]
    for i, layer in enumerate(net.layers):
        if isinstance(layer, MBConvOperator):
            layer_costs, size = mbconv_costs(layer.c_in, layer.c_out, layer.hidden_channels, layer.spec.kernel,
                                             layer.stride, size, prefix=f"layers.{i}")
            costs.extend(layer_costs)
        else:
            cost, size = _conv_cost(layer, size, f"layers.{i}")
            costs.append(cost)
    fc = net.head.fc
    costs.append(LayerCost("head.fc", fc.weight.shape[0] * fc.weight.shape[1]))
    return costs


def oracle_latency(costs: Sequence[LayerCost], params: OracleParams,
                   rng: Optional[np.random.Generator] = None) -> float:
    """
    Sum of layer latencies plus clipped Gaussian noise.

    Noise is drawn only when ``sigma > 0`` and a generator is given; it is
    clipped below at -50% of the noiseless value.
    """
    mean = float(sum(cost.latency(params) for cost in costs))
    if params.sigma > 0 and rng is not None:
        noise = max(float(rng.normal(0.0, params.sigma)), -0.5 * mean)
        return mean + noise
    return mean


def synthetic_oracle(net: Network, params: OracleParams, rng: Optional[np.random.Generator] = None,
                     resolution: Optional[int] = None) -> float:
    """Latency (ms) of a network on the synthetic device."""
    return oracle_latency(network_layer_costs(net, resolution), params, rng)


def latency_table(cfg: SupernetConfig, params: OracleParams,
                  resolution: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """
    Noiseless post-transform latency of every operator choice.

    Returns:
        (fixed stem + head latency, table [L, N]); the latency of an
        architecture is fixed + sum of its selected table entries
    """
    params = params.noiseless()
    size = resolution or cfg.input_shape[1]
    stem_out = _out_size(size, 3, 2, 1)
    fixed = [LayerCost("stem", cfg.input_shape[0] * cfg.stem_channels * 9 * stem_out * stem_out),
             LayerCost("head.fc", cfg.layers[-1].c_out * cfg.num_classes)]
    specs = operator_space()
    table = np.zeros((cfg.num_layers, len(specs)))
    size = stem_out
    for i, layer in enumerate(cfg.layers):
        for n, spec in enumerate(specs):
            costs, out = operator_costs(layer, spec, size)
            table[i, n] = oracle_latency(costs, params)
        size = out
    return oracle_latency(fixed, params), table


def latency_range(cfg: SupernetConfig, params: OracleParams) -> Tuple[float, float]:
    """Exact noiseless (min, max) latency over the whole search space."""
    fixed, table = latency_table(cfg, params)
    return fixed + float(table.min(axis=1).sum()), fixed + float(table.max(axis=1).sum())


def architecture_latency(cfg: SupernetConfig, params: OracleParams, arch: Sequence[int]) -> float:
    fixed, table = latency_table(cfg, params)
    return fixed + float(table[np.arange(cfg.num_layers), list(arch)].sum())


# --------------------------------------------------------------------------
# Pairs
# --------------------------------------------------------------------------

@dataclass
class LatencyPair:
    arch: List[int]
    latency_ms: float

    def onehot(self, num_operators: int = NUM_OPERATORS) -> np.ndarray:
        return indices_to_onehot(self.arch, num_operators)

    def to_record(self) -> Dict[str, Any]:
        return {"arch": list(self.arch), "latency_ms": float(self.latency_ms)}


def measure_architecture(cfg: SupernetConfig, arch: Sequence[int], params: OracleParams,
                         rng: Optional[np.random.Generator] = None) -> float:
    """Decode, transform and measure one architecture."""
    network = build_network(cfg, arch, rng=None)
    network.eval()
    return synthetic_oracle(transform_network(network), params, rng)


def _generate_pair(cfg: SupernetConfig, params: OracleParams, seed: int, index: int) -> LatencyPair:
    rng = np.random.default_rng([seed, index])
    arch = [int(i) for i in rng.integers(0, NUM_OPERATORS, size=cfg.num_layers)]
    return LatencyPair(arch, measure_architecture(cfg, arch, params, rng))


def generate_pairs(cfg: SupernetConfig, n: int, params: OracleParams, seed: int,
                   threads: int = 1) -> List[LatencyPair]:
    """
    Sample ``n`` uniform random architectures and measure their shallow forms.

    Pair ``i`` draws from its own generator seeded with ``[seed, i]``, so the
    result does not depend on ``threads``.
    """
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(lambda i: _generate_pair(cfg, params, seed, i), range(n)))
    else:
        pairs = [_generate_pair(cfg, params, seed, i) for i in range(n)]
    logger.info(f"Generated {len(pairs)} architecture-latency pairs")
    return pairs


def save_latency_pairs(path: Union[str, Path], pairs: Sequence[LatencyPair],
                       stamp: Optional[Dict[str, Any]] = None) -> Path:
    return write_jsonl(path, (pair.to_record() for pair in pairs), stamp)


def load_latency_pairs(path: Union[str, Path], num_layers: int,
                       num_operators: int = NUM_OPERATORS) -> List[LatencyPair]:
    """
    Raises:
        DataFormatError: On a malformed record
    """
    pairs = []
    for i, record in enumerate(read_jsonl(path, produced_by="latency-fit")):
        try:
            arch = [int(a) for a in record["arch"]]
            latency = float(record["latency_ms"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: record {i} is not a latency pair: {e}") from e
        if len(arch) != num_layers or any(not 0 <= a < num_operators for a in arch):
            raise DataFormatError(f"{path}: record {i} has an invalid architecture {arch}")
        if not latency > 0:
            raise DataFormatError(f"{path}: record {i} has non-positive latency {latency}")
        pairs.append(LatencyPair(arch, latency))
    return pairs


# --------------------------------------------------------------------------
# Predictor
# --------------------------------------------------------------------------

class LatencyModel(Module):
    """
    MLP from a flattened [L, N] architecture encoding to milliseconds.

    Targets are standardised during training; ``target_mean`` and
    ``target_scale`` map the raw output back and a final max(., 0) keeps the
    prediction non-negative.
    """

    def __init__(self, num_layers: int, num_operators: int = NUM_OPERATORS, hidden: Sequence[int] = (256, 128),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.num_layers = num_layers
        self.num_operators = num_operators
        self.hidden = tuple(int(h) for h in hidden)
        sizes = (num_layers * num_operators,) + self.hidden
        blocks: List[Module] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            blocks += [Linear(fan_in, fan_out, rng=rng, dtype=dtype), ReLU()]
        blocks.append(Linear(sizes[-1], 1, rng=rng, dtype=dtype, gain=1.0))
        self.body = Sequential(*blocks)
        self.register_buffer("target_mean", Tensor(np.zeros(1, dtype=dtype), name="target_mean"))
        self.register_buffer("target_scale", Tensor(np.ones(1, dtype=dtype), name="target_scale"))
        self.trained = False

    @property
    def input_dim(self) -> int:
        return self.num_layers * self.num_operators

    def raw(self, x: np.ndarray) -> np.ndarray:
        return self.body(x)[:, 0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = self.raw(x) * self.target_scale.data[0] + self.target_mean.data[0]
        return np.maximum(y, 0.0)

    def encode(self, encodings) -> np.ndarray:
        """Flatten [L, N], [B, L, N] or a list of index lists into [B, L*N]."""
        array = np.asarray(encodings)
        if array.ndim == 2 and array.shape != (self.num_layers, self.num_operators):
            array = np.stack([indices_to_onehot(a, self.num_operators) for a in array])
        if array.ndim == 2:
            array = array[None]
        if array.shape[1:] != (self.num_layers, self.num_operators):
            raise DataFormatError(
                f"encoding shape {array.shape[1:]} does not match ({self.num_layers}, {self.num_operators})"
            )
        return array.reshape(array.shape[0], -1).astype(self.target_mean.dtype)


def predict(model: LatencyModel, encodings) -> np.ndarray:
    """Predicted milliseconds for one or more architectures."""
    out = model(model.encode(encodings))
    model.release_caches()
    return out.astype(np.float64)


def predict_with_grad(model: LatencyModel, encoding: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Predicted latency of a (possibly soft) [L, N] encoding and its gradient.

    Model parameter gradients touched by the backward pass are cleared.
    """
    x = np.asarray(encoding, dtype=model.target_mean.dtype).reshape(1, -1)
    raw = model.body(x)
    scale = model.target_scale.data[0]
    y = float(raw[0, 0] * scale + model.target_mean.data[0])
    draw = np.full_like(raw, scale if y > 0 else 0.0)
    dx = model.body.backward(draw)
    model.zero_grad()
    return max(y, 0.0), dx.reshape(model.num_layers, model.num_operators).astype(np.float64)


def _train(model: LatencyModel, x: np.ndarray, targets: np.ndarray, epochs: int, batch_size: int,
           lr: float, rng: np.random.Generator) -> None:
    mean = float(targets.mean())
    std = float(targets.std())
    model.target_mean.data[:] = mean
    model.target_scale.data[:] = std if std > 0 else 1.0
    normalised = ((targets - mean) / model.target_scale.data[0]).astype(x.dtype)
    optimizer = Adam(model.named_parameters(), lr=lr)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            raw = model.body(x[idx])
            residual = raw[:, 0] - normalised[idx]
            optimizer.zero_grad()
            model.body.backward((2.0 * residual / len(idx))[:, None].astype(raw.dtype))
            optimizer.step()
    model.trained = True


def _rmse(model: LatencyModel, x: np.ndarray, targets: np.ndarray) -> float:
    pred = model(x)
    model.release_caches()
    return float(np.sqrt(np.mean((pred.astype(np.float64) - targets) ** 2)))


def _spearman(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if len(a) < 2:
        return None
    rho = stats.spearmanr(a, b)[0]
    return float(rho) if np.isfinite(rho) else None


@dataclass
class PredictorReport:
    n_train: int
    n_val: int
    train_rmse: float
    val_rmse: float
    spearman: Optional[float]
    latency_min: float
    latency_max: float

    @property
    def rmse_fraction(self) -> Optional[float]:
        span = self.latency_max - self.latency_min
        return self.val_rmse / span if span > 0 else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "train_rmse_ms": self.train_rmse,
            "val_rmse_ms": self.val_rmse,
            "val_rmse_fraction_of_range": self.rmse_fraction,
            "spearman": self.spearman,
            "latency_min_ms": self.latency_min,
            "latency_max_ms": self.latency_max,
        }


def _arrays(pairs: Sequence[LatencyPair], num_operators: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([pair.onehot(num_operators).reshape(-1) for pair in pairs]).astype(dtype)
    t = np.array([pair.latency_ms for pair in pairs], dtype=np.float64)
    return x, t


def _split(n: int, train_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = min(max(1, int(round(train_fraction * n))), n)
    return order[:n_train], order[n_train:]


def fit_predictor(
    pairs: Sequence[LatencyPair],
    num_layers: int,
    num_operators: int = NUM_OPERATORS,
    train_fraction: float = 0.8,
    epochs: int = 300,
    batch_size: int = 64,
    lr: float = 1e-3,
    hidden: Sequence[int] = (256, 128),
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LatencyModel, PredictorReport]:
    """
    Train the latency MLP with Adam on mean squared error.

    Returns:
        Trained model and a report holding held-out RMSE and rank correlation

    Raises:
        InsufficientDataError: With fewer than 50 pairs
    """
    if len(pairs) < MIN_PAIRS:
        raise InsufficientDataError(len(pairs), MIN_PAIRS)
    rng = rng or np.random.default_rng(0)
    train_idx, val_idx = _split(len(pairs), train_fraction, rng)
    model = LatencyModel(num_layers, num_operators, hidden, rng=rng)
    x, t = _arrays(pairs, num_operators, model.target_mean.dtype)
    if len(val_idx) == 0:
        val_idx = train_idx
    _train(model, x[train_idx], t[train_idx], epochs, batch_size, lr, rng)

    val_pred = predict(model, x[val_idx].reshape(-1, num_layers, num_operators))
    report = PredictorReport(
        n_train=len(train_idx),
        n_val=len(val_idx),
        train_rmse=_rmse(model, x[train_idx], t[train_idx]),
        val_rmse=_rmse(model, x[val_idx], t[val_idx]),
        spearman=_spearman(val_pred, t[val_idx]),
        latency_min=float(t.min()),
        latency_max=float(t.max()),
    )
    logger.info(
        f"Latency predictor: val RMSE {report.val_rmse:.4f} ms on {report.n_val} pairs, "
        f"Spearman {report.spearman}"
    )
    return model, report


def learning_curve(
    pairs: Sequence[LatencyPair],
    sizes: Sequence[int],
    num_layers: int,
    num_operators: int = NUM_OPERATORS,
    train_fraction: float = 0.8,
    epochs: int = 300,
    batch_size: int = 64,
    lr: float = 1e-3,
    hidden: Sequence[int] = (256, 128),
    seed: int = 0,
) -> List[Dict[str, float]]:
    """Held-out RMSE when fitting on growing subsets of a fixed training split."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = _split(len(pairs), train_fraction, rng)
    if len(val_idx) == 0:
        val_idx = train_idx
    curve = []
    for size in sizes:
        size = min(int(size), len(train_idx))
        model = LatencyModel(num_layers, num_operators, hidden, rng=np.random.default_rng([seed, size]))
        x, t = _arrays(pairs, num_operators, model.target_mean.dtype)
        _train(model, x[train_idx[:size]], t[train_idx[:size]], epochs, batch_size, lr,
               np.random.default_rng([seed, size, 1]))
        curve.append({"n_train": size, "val_rmse_ms": _rmse(model, x[val_idx], t[val_idx])})
    return curve


def predictor_to_checkpoint(model: LatencyModel, config: Dict[str, Any],
                            meta: Optional[Dict[str, Any]] = None) -> Checkpoint:
    header = {
        "num_layers": model.num_layers,
        "num_operators": model.num_operators,
        "hidden": list(model.hidden),
        "trained": model.trained,
    }
    header.update(meta or {})
    return Checkpoint(kind="predictor", tensors=model.state_dict(), config=config, meta=header)


def predictor_from_checkpoint(checkpoint: Checkpoint) -> LatencyModel:
    meta = checkpoint.meta
    model = LatencyModel(int(meta["num_layers"]), int(meta["num_operators"]), meta["hidden"])
    model.load_state_dict(checkpoint.tensors)
    model.trained = bool(meta.get("trained", True))
    return model
