"""
Hybrid transformable operator space, supernet construction and architecture
encoding.

Operators are inverted-residual blocks (1x1 expand, KxK depthwise, 1x1
project, each followed by batch norm). Linear operators keep both internal
activations at identity and append a ReLU6 after the residual add, so the
whole block is ReLU6(affine(x)) and collapses into a single convolution.

The block pads its input by (K-1)/2 *before* the 1x1 expansion and runs the
depthwise convolution without padding. Output sizes match the usual
same-padded form; the affine map stays exact at the borders.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.common.errors import ArchitectureError, ShapeMismatchError
from utils.common.logger import get_logger
from utils.nas import tensor as T
from utils.nas.layers import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    ConvBNAct,
    GraftedActivation,
    Module,
    ModuleList,
    ReLU6,
    TrackedModule,
)
from utils.nas.tensor import Tensor

logger = get_logger(__name__)

KERNEL_SIZES = (3, 5, 7)
EXPANSIONS = (3, 6)


@dataclass(frozen=True, order=True)
class OperatorSpec:
    """One MBConv variant; ordering is (linear, kernel, expansion)."""

    linear: bool
    kernel: int
    expansion: int

    @property
    def name(self) -> str:
        return f"{'lin' if self.linear else 'mb'}_k{self.kernel}_e{self.expansion}"


@lru_cache(maxsize=1)
def _operator_space() -> Tuple[OperatorSpec, ...]:
    specs = [OperatorSpec(linear, k, e) for linear in (False, True) for k in KERNEL_SIZES for e in EXPANSIONS]
    return tuple(sorted(specs))


def operator_space() -> List[OperatorSpec]:
    """The 12 operator specs in their fixed enumeration order (index 0 = non-linear K3 E3)."""
    return list(_operator_space())


NUM_OPERATORS = len(_operator_space())


class LayerSpec(BaseModel):
    """Channels and stride of one searchable layer."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    c_in: int = Field(gt=0)
    c_out: int = Field(gt=0)
    stride: int = 1

    @model_validator(mode="after")
    def _check_stride(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        return self


def _desk_layers() -> List[LayerSpec]:
    return [
        LayerSpec(c_in=8, c_out=16, stride=2),
        LayerSpec(c_in=16, c_out=16, stride=1),
        LayerSpec(c_in=16, c_out=32, stride=2),
        LayerSpec(c_in=32, c_out=32, stride=1),
        LayerSpec(c_in=32, c_out=64, stride=1),
        LayerSpec(c_in=64, c_out=64, stride=1),
    ]


class SupernetConfig(BaseModel):
    """Shape of the supernet: stem, searchable layers and classifier."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_shape: Tuple[int, int, int] = (3, 32, 32)
    stem_channels: int = Field(default=8, gt=0)
    layers: List[LayerSpec] = Field(default_factory=_desk_layers)
    num_classes: int = Field(default=10, gt=1)
    bn_eps: float = Field(default=1e-5, gt=0)
    bn_momentum: float = Field(default=0.1, gt=0, le=1)

    @model_validator(mode="after")
    def _check_consistency(self):
        if not self.layers:
            raise ValueError("supernet needs at least one searchable layer")
        previous = self.stem_channels
        for i, layer in enumerate(self.layers):
            if layer.c_in != previous:
                raise ValueError(f"layers[{i}].c_in={layer.c_in} does not match previous output channels {previous}")
            previous = layer.c_out
        _, h, w = self.input_shape
        if h != w:
            raise ValueError(f"input must be square, got {h}x{w}")
        if h % self.total_stride:
            raise ValueError(f"input size {h} is not divisible by the total stride {self.total_stride}")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def total_stride(self) -> int:
        return 2 * int(np.prod([layer.stride for layer in self.layers]))

    @property
    def min_resolution(self) -> int:
        return self.total_stride


def search_space_cardinality(num_layers: int, num_operators: int = NUM_OPERATORS) -> int:
    """Number of distinct architectures: N ** L."""
    return num_operators ** num_layers


class MBConvOperator(TrackedModule):
    """
    Inverted-residual operator with input padding ahead of the expansion.

    When ``batch_norm`` is False the block is built in its folded form (conv
    biases carry the BN affine terms).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        stride: int,
        spec: OperatorSpec,
        rng: Optional[np.random.Generator] = None,
        dtype=T.DEFAULT_DTYPE,
        batch_norm: bool = True,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
    ):
        super().__init__()
        self.spec = spec
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.pad = (spec.kernel - 1) // 2
        self.residual = stride == 1 and c_in == c_out
        hidden = spec.expansion * c_in

        def make_bn(channels):
            return BatchNorm2d(channels, bn_eps, bn_momentum, dtype) if batch_norm else None

        def make_act():
            return GraftedActivation(1.0) if spec.linear else ReLU6()

        self.expand = Conv2d(c_in, hidden, 1, padding=0, rng=rng, dtype=dtype)
        self.bn1 = make_bn(hidden)
        self.act1 = make_act()
        self.depthwise = Conv2d(hidden, hidden, spec.kernel, stride=stride, padding=0, groups=hidden,
                                rng=rng, dtype=dtype)
        self.bn2 = make_bn(hidden)
        self.act2 = make_act()
        self.project = Conv2d(hidden, c_out, 1, padding=0, rng=rng, dtype=dtype)
        self.bn3 = make_bn(c_out)
        self.out_act = ReLU6() if spec.linear else None

    @property
    def is_folded(self) -> bool:
        return self.bn1 is None

    @property
    def hidden_channels(self) -> int:
        return self.expand.out_channels

    def stages(self):
        return [(self.expand, self.bn1, self.act1),
                (self.depthwise, self.bn2, self.act2),
                (self.project, self.bn3, None)]

    def set_graft(self, eps: float) -> None:
        """Set the blend factor of both internal activations (linear operators only)."""
        if not self.spec.linear:
            return
        self.act1.eps = float(eps)
        self.act2.eps = float(eps)

    def pre_activation(self, x: np.ndarray) -> np.ndarray:
        """Block output before the trailing ReLU6 (residual included)."""
        h = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad))) if self.pad else x
        for conv, bn, act in self.stages():
            h = conv(h)
            if bn is not None:
                h = bn(h)
            if act is not None:
                h = act(h)
        if self.residual:
            h = h + x
        return h

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeMismatchError("MBConvOperator", ["C_in"], self.c_in, x.shape[1])
        y = self.pre_activation(x)
        if self.out_act is not None:
            y = self.out_act(y)
        self._hold(x.shape)
        return y

    def backward(self, dout):
        x_shape = self._drop()
        if self.out_act is not None:
            dout = self.out_act.backward(dout)
        d_residual = dout if self.residual else None
        for conv, bn, act in reversed(self.stages()):
            if act is not None:
                dout = act.backward(dout)
            if bn is not None:
                dout = bn.backward(dout)
            dout = conv.backward(dout)
        if self.pad:
            h, w = x_shape[2:]
            dout = dout[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        if d_residual is not None:
            dout = dout + d_residual
        return dout

    def conv_layer_count(self) -> int:
        return 3


def build_stem(cfg: SupernetConfig, rng: Optional[np.random.Generator], dtype=T.DEFAULT_DTYPE,
               batch_norm: bool = True) -> ConvBNAct:
    """3x3 stride-2 convolution + BN + ReLU6."""
    conv = Conv2d(cfg.input_shape[0], cfg.stem_channels, 3, stride=2, padding=1, rng=rng, dtype=dtype)
    bn = BatchNorm2d(cfg.stem_channels, cfg.bn_eps, cfg.bn_momentum, dtype) if batch_norm else None
    return ConvBNAct(conv, bn, ReLU6())


@dataclass
class ArchParams:
    """Architecture logits alpha, one row per searchable layer."""

    alpha: Tensor

    @classmethod
    def zeros(cls, num_layers: int, num_operators: int = NUM_OPERATORS) -> "ArchParams":
        return cls(Tensor(np.zeros((num_layers, num_operators), dtype=np.float64), name="alpha"))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.alpha.shape


class SearchableLayer(Module):
    """All candidate operators of one layer; runs one path or the softmax mixture."""

    def __init__(self, index: int, operators: Sequence[MBConvOperator]):
        super().__init__()
        self.index = index
        self.operators = ModuleList(operators)
        object.__setattr__(self, "_path", None)

    @property
    def num_operators(self) -> int:
        return len(self.operators)

    def forward_single(self, x: np.ndarray, op_index: int, gate: float = 1.0) -> np.ndarray:
        out = self.operators[op_index](x)
        object.__setattr__(self, "_path", ("single", op_index, gate, out))
        return out if gate == 1.0 else gate * out

    def forward_mixed(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        outs = [op(x) for op in self.operators]
        object.__setattr__(self, "_path", ("mixed", weights, outs))
        mixed = np.zeros_like(outs[0])
        for w, out in zip(weights, outs):
            mixed = mixed + out.dtype.type(w) * out
        return mixed

    def backward(self, dout):
        """Returns (dx, gradient of the gate or mixture weights)."""
        kind, *rest = self._path
        object.__setattr__(self, "_path", None)
        if kind == "single":
            op_index, gate, out = rest
            gate_grad = float(np.sum(dout * out, dtype=np.float64))
            dx = self.operators[op_index].backward(dout if gate == 1.0 else gate * dout)
            return dx, gate_grad
        weights, outs = rest
        weight_grads = np.array([np.sum(dout * out, dtype=np.float64) for out in outs])
        dx = None
        for op, w in zip(self.operators, weights):
            d = op.backward(dout.dtype.type(w) * dout)
            dx = d if dx is None else dx + d
        return dx, weight_grads

    def release_caches(self) -> None:
        object.__setattr__(self, "_path", None)
        super().release_caches()


class Supernet(Module):
    """Stem, L searchable layers of N candidate operators, and classifier head."""

    def __init__(self, cfg: SupernetConfig, stem: ConvBNAct, layers: Sequence[SearchableLayer],
                 head: ClassifierHead):
        super().__init__()
        self.cfg = cfg
        self.stem = stem
        self.layers = ModuleList(layers)
        self.head = head
        self.arch = ArchParams.zeros(len(layers), layers[0].num_operators if layers else NUM_OPERATORS)
        object.__setattr__(self, "_mode", None)
        object.__setattr__(self, "gate_grads", None)
        object.__setattr__(self, "mixture_grads", None)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_operators(self) -> int:
        return self.layers[0].num_operators

    def candidate_count(self) -> Tuple[int, int]:
        return self.num_layers, self.num_operators

    def forward_path(self, x: np.ndarray, indices: Sequence[int], gates: Optional[Sequence[float]] = None) -> np.ndarray:
        """Forward along one operator per layer, scaling each by its gate value."""
        if len(indices) != self.num_layers:
            raise ArchitectureError(f"path has {len(indices)} entries, supernet has {self.num_layers} layers")
        gates = [1.0] * self.num_layers if gates is None else gates
        h = self.stem(x)
        for layer, idx, gate in zip(self.layers, indices, gates):
            h = layer.forward_single(h, int(idx), float(gate))
        object.__setattr__(self, "_mode", "path")
        return self.head(h)

    def forward_mixed(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Forward with every layer replaced by its weighted operator mixture."""
        h = self.stem(x)
        for layer, row in zip(self.layers, weights):
            h = layer.forward_mixed(h, row)
        object.__setattr__(self, "_mode", "mixed")
        return self.head(h)

    def forward(self, x):
        raise NotImplementedError("use forward_path or forward_mixed")

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """
        Backpropagate through the last forward pass.

        Fills ``gate_grads`` (path mode, shape [L]) or ``mixture_grads``
        (mixed mode, shape [L, N]).
        """
        d = self.head.backward(dlogits)
        grads = []
        for layer in reversed(list(self.layers)):
            d, g = layer.backward(d)
            grads.append(g)
        grads.reverse()
        if self._mode == "path":
            object.__setattr__(self, "gate_grads", np.array(grads, dtype=np.float64))
        else:
            object.__setattr__(self, "mixture_grads", np.stack(grads).astype(np.float64))
        object.__setattr__(self, "_mode", None)
        return self.stem.backward(d)


class Network(Module):
    """Stand-alone network: stem, one operator per layer, classifier head."""

    def __init__(self, cfg: SupernetConfig, arch: Sequence[int], stem: ConvBNAct, layers: Sequence[Module],
                 head: ClassifierHead, transformed: bool = False):
        super().__init__()
        self.cfg = cfg
        self.arch = [int(i) for i in arch]
        self.stem = stem
        self.layers = ModuleList(layers)
        self.head = head
        self.transformed = transformed

    def forward(self, x):
        h = self.stem(x)
        for layer in self.layers:
            h = layer(h)
        return self.head(h)

    def backward(self, dlogits):
        d = self.head.backward(dlogits)
        for layer in reversed(list(self.layers)):
            d = layer.backward(d)
        return self.stem.backward(d)

    def linear_operators(self) -> List[MBConvOperator]:
        return [op for op in self.layers if isinstance(op, MBConvOperator) and op.spec.linear]

    def set_graft(self, eps: float) -> None:
        for op in self.linear_operators():
            op.set_graft(eps)

    def searchable_depth(self) -> int:
        return sum(layer.conv_layer_count() for layer in self.layers)

    def depth(self) -> int:
        """Convolution and FC layers along the inference path."""
        return 1 + self.searchable_depth() + 1

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode logits in fixed-size chunks (restores train mode afterwards)."""
        was_training = self.training
        self.eval()
        try:
            chunks = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        finally:
            self.release_caches()
            self.train(was_training)
        return np.concatenate(chunks, axis=0)


def _make_operator(cfg: SupernetConfig, layer: LayerSpec, spec: OperatorSpec, rng, dtype,
                   batch_norm: bool = True) -> MBConvOperator:
    return MBConvOperator(layer.c_in, layer.c_out, layer.stride, spec, rng=rng, dtype=dtype,
                          batch_norm=batch_norm, bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)


def build_supernet(cfg: SupernetConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> Supernet:
    """
    Instantiate every candidate operator with fan-in scaled Gaussian weights.

    Args:
        cfg: Validated supernet config
        rng: Generator consumed in a fixed order (stem, layers, operators, head)
        dtype: Parameter dtype

    Returns:
        Supernet with zero-initialised architecture parameters
    """
    specs = operator_space()
    stem = build_stem(cfg, rng, dtype)
    layers = []
    for i, layer in enumerate(cfg.layers):
        ops = [_make_operator(cfg, layer, spec, rng, dtype) for spec in specs]
        layers.append(SearchableLayer(i, ops))
    head = ClassifierHead(cfg.layers[-1].c_out, cfg.num_classes, rng=rng, dtype=dtype)
    supernet = Supernet(cfg, stem, layers, head)
    logger.debug(f"Built supernet: {cfg.num_layers} layers x {len(specs)} operators")
    return supernet


def build_network(cfg: SupernetConfig, arch: Sequence[int], rng: Optional[np.random.Generator],
                  dtype=T.DEFAULT_DTYPE) -> Network:
    """Freshly initialised stand-alone network for an architecture."""
    indices = validate_indices(arch, cfg.num_layers)
    specs = operator_space()
    stem = build_stem(cfg, rng, dtype)
    ops = [_make_operator(cfg, layer, specs[idx], rng, dtype) for layer, idx in zip(cfg.layers, indices)]
    head = ClassifierHead(cfg.layers[-1].c_out, cfg.num_classes, rng=rng, dtype=dtype)
    return Network(cfg, indices, stem, ops, head)


def validate_indices(arch: Sequence[int], num_layers: int, num_operators: int = NUM_OPERATORS) -> List[int]:
    indices = [int(i) for i in arch]
    if len(indices) != num_layers:
        raise ArchitectureError(f"architecture has {len(indices)} entries, expected {num_layers}")
    bad = [i for i in indices if not 0 <= i < num_operators]
    if bad:
        raise ArchitectureError(f"operator indices out of range [0, {num_operators}): {bad}")
    return indices


def encode_onehot(alpha: np.ndarray) -> np.ndarray:
    """Per-row argmax of alpha as a one-hot matrix; ties go to the lowest index."""
    alpha = np.asarray(alpha)
    onehot = np.zeros(alpha.shape, dtype=np.float32)
    onehot[np.arange(alpha.shape[0]), np.argmax(alpha, axis=1)] = 1.0
    return onehot


def indices_to_onehot(indices: Sequence[int], num_operators: int = NUM_OPERATORS) -> np.ndarray:
    idx = validate_indices(indices, len(indices), num_operators)
    onehot = np.zeros((len(idx), num_operators), dtype=np.float32)
    onehot[np.arange(len(idx)), idx] = 1.0
    return onehot


def onehot_to_indices(onehot: np.ndarray) -> List[int]:
    """
    Selection indices of a one-hot architecture.

    Raises:
        ArchitectureError: If any row is not exactly one-hot
    """
    onehot = np.asarray(onehot)
    if onehot.ndim != 2:
        raise ArchitectureError(f"one-hot architecture must be 2-D, got shape {onehot.shape}")
    binary = np.isin(onehot, (0, 1)).all()
    if not binary or not np.all(onehot.sum(axis=1) == 1):
        raise ArchitectureError("malformed one-hot architecture: every row needs exactly one 1")
    return [int(i) for i in np.argmax(onehot, axis=1)]


def decode_architecture(arch: np.ndarray, supernet: Supernet) -> Network:
    """
    Extract the stand-alone network selected by a one-hot architecture.

    Weights of the stem, chosen operators and head are deep-copied.
    """
    indices = onehot_to_indices(arch)
    if len(indices) != supernet.num_layers or arch.shape[1] != supernet.num_operators:
        raise ArchitectureError(
            f"architecture shape {arch.shape} does not match supernet {supernet.candidate_count()}"
        )
    supernet.release_caches()
    stem = supernet.stem.clone()
    ops = [layer.operators[idx].clone() for layer, idx in zip(supernet.layers, indices)]
    head = supernet.head.clone()
    network = Network(supernet.cfg, indices, stem, ops, head)
    network.train(supernet.training)
    return network
