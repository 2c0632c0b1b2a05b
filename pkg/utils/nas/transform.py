"""
Deep-to-shallow structural transformation.

Batch norm folding, generic merging of two stride-1 convolutions, and the
closed-form collapse of a linear MBConv operator into one KxK convolution.
All folding is computed in float64 and cast back to the source dtype.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from utils.common.errors import ShapeMismatchError, TransformError, UnsupportedMergeError
from utils.common.logger import get_logger
from utils.nas.layers import Conv2d, ConvBNAct, Module, ReLU6
from utils.nas.search_space import MBConvOperator, Network, SupernetConfig, build_network
from utils.nas.tensor import BatchNormState, ConvWeights, Tensor

logger = get_logger(__name__)


def _weights(weight: np.ndarray, bias: np.ndarray, dtype, stride: int = 1, padding: int = 0,
             groups: int = 1) -> ConvWeights:
    return ConvWeights(Tensor(weight.astype(dtype)), Tensor(bias.astype(dtype)), stride, padding, groups)


def fold_bn(conv: ConvWeights, bn: BatchNormState) -> ConvWeights:
    """
    Absorb an inference-mode batch norm into the preceding convolution.

    Raises:
        ShapeMismatchError: If the BN channel count differs from the conv output channels
    """
    if bn.num_channels != conv.out_channels:
        raise ShapeMismatchError("fold_bn", ["C_out"], conv.out_channels, bn.num_channels)
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
    channel = conv.output_channel_index()
    weight = conv.weight.data.astype(np.float64) * scale[channel][:, :, None, None]
    bias = (conv.bias.data.astype(np.float64) - bn.running_mean.data) * scale + bn.beta.data
    return _weights(weight, bias, conv.weight.dtype, conv.stride, conv.padding, conv.groups)


def merge_conv_pair(w1: ConvWeights, w2: ConvWeights) -> ConvWeights:
    """
    Merge two consecutive stride-1 ungrouped convolutions into one of size K1+K2-1.

    The merged conv reproduces the composition exactly on valid (unpadded)
    regions. With same-padding on both inputs it agrees on the interior only.

    Raises:
        UnsupportedMergeError: Strided or grouped input, or channel mismatch
    """
    for name, w in (("first", w1), ("second", w2)):
        if w.stride != 1 or w.groups != 1:
            raise UnsupportedMergeError(
                f"{name} conv has stride {w.stride}, groups {w.groups}; only stride-1 ungrouped pairs merge"
            )
    if w1.out_channels != w2.in_channels:
        raise UnsupportedMergeError(f"channel mismatch: {w1.out_channels} -> {w2.in_channels}")
    k1, k2 = w1.kernel_size, w2.kernel_size
    a = w1.weight.data.astype(np.float64)
    b = w2.weight.data.astype(np.float64)
    merged = np.zeros((w1.in_channels, w2.out_channels, k1 + k2 - 1, k1 + k2 - 1))
    for h in range(k2):
        for w in range(k2):
            merged[:, :, h:h + k1, w:w + k1] += np.einsum("ijhw,jo->iohw", a, b[:, :, h, w])
    bias = np.einsum("j,jo->o", w1.bias.data.astype(np.float64), b.sum(axis=(2, 3))) + w2.bias.data
    return _weights(merged, bias, w1.weight.dtype, 1, w1.padding + w2.padding, 1)


def depthwise_to_dense(weights: ConvWeights) -> ConvWeights:
    """Expand a depthwise conv into the equivalent (block-diagonal) ungrouped conv."""
    if not weights.is_depthwise:
        raise UnsupportedMergeError("expected a depthwise convolution")
    c, k = weights.in_channels, weights.kernel_size
    dense = np.zeros((c, c, k, k), dtype=np.float64)
    dense[np.arange(c), np.arange(c)] = weights.weight.data[:, 0]
    return _weights(dense, weights.bias.data.astype(np.float64), weights.weight.dtype,
                    weights.stride, weights.padding, 1)


class CollapsedConv(ConvBNAct):
    """Single KxK convolution standing in for a linear MBConv operator."""

    def __init__(self, weights: ConvWeights, trailing_relu6: bool = True, spec=None):
        super().__init__(Conv2d.from_weights(weights), None, ReLU6() if trailing_relu6 else None)
        self.spec = spec

    @property
    def trailing_relu6(self) -> bool:
        return self.act is not None

    def conv_layer_count(self) -> int:
        return 1


def _stage_weights(op: MBConvOperator) -> Tuple[ConvWeights, ConvWeights, ConvWeights]:
    convs = (op.expand, op.depthwise, op.project)
    if op.is_folded:
        return tuple(conv.weights for conv in convs)
    bns = (op.bn1, op.bn2, op.bn3)
    return tuple(fold_bn(conv.weights, bn.state) for conv, bn in zip(convs, bns))


def collapse_mbconv(op: MBConvOperator) -> CollapsedConv:
    """
    Collapse a linear operator into one KxK convolution followed by ReLU6.

    W*[ci, co] = sum_j W1[ci, j] * Wd[j] * W2[j, co], plus a centred identity
    kernel when the operator has a residual connection.

    Raises:
        TransformError: Non-linear operator, non-identity internal activation
            or an inconsistent residual
    """
    if not op.spec.linear:
        raise TransformError(f"operator {op.spec.name} is non-linear and cannot be collapsed")
    for act in (op.act1, op.act2):
        if not getattr(act, "is_identity", False):
            raise TransformError(f"operator {op.spec.name} still has a grafted activation (eps={act.eps})")
    if op.residual and (op.stride != 1 or op.c_in != op.c_out):
        raise TransformError("residual operator must have stride 1 and matching channels")

    expand, depthwise, project = _stage_weights(op)
    dtype = op.expand.weight.dtype
    w1 = expand.weight.data.astype(np.float64)[:, :, 0, 0]
    wd = depthwise.weight.data.astype(np.float64)[:, 0]
    w2 = project.weight.data.astype(np.float64)[:, :, 0, 0]
    b1 = expand.bias.data.astype(np.float64)
    bd = depthwise.bias.data.astype(np.float64)
    b2 = project.bias.data.astype(np.float64)

    weight = np.einsum("ij,jhw,jo->iohw", w1, wd, w2)
    bias = (b1 * wd.sum(axis=(1, 2)) + bd) @ w2 + b2
    k = depthwise.kernel_size
    if op.residual:
        centre = (k - 1) // 2
        channels = np.arange(op.c_in)
        weight[channels, channels, centre, centre] += 1.0
    collapsed = _weights(weight, bias, dtype, depthwise.stride, (k - 1) // 2, 1)
    return CollapsedConv(collapsed, trailing_relu6=op.out_act is not None, spec=op.spec)


def fold_mbconv(op: MBConvOperator) -> MBConvOperator:
    """Fold the three batch norms of an operator into its convolutions."""
    if op.is_folded:
        return op.clone()
    expand, depthwise, project = _stage_weights(op)
    folded = MBConvOperator(op.c_in, op.c_out, op.stride, op.spec, rng=None,
                            dtype=op.expand.weight.dtype, batch_norm=False)
    folded.expand = Conv2d.from_weights(expand)
    folded.depthwise = Conv2d.from_weights(depthwise)
    folded.project = Conv2d.from_weights(project)
    if op.spec.linear:
        folded.set_graft(op.act1.eps)
    return folded


def _fold_conv_bn_act(block: ConvBNAct) -> ConvBNAct:
    if block.bn is None:
        return block.clone()
    act = block.act.clone() if block.act is not None else None
    return ConvBNAct(Conv2d.from_weights(fold_bn(block.conv.weights, block.bn.state)), None, act)


@dataclass
class DepthReport:
    depth_before: int
    depth_after: int
    searchable_before: int
    searchable_after: int
    collapsed: int
    folded: int

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def transform_layer(layer: Module) -> Module:
    if isinstance(layer, MBConvOperator):
        return collapse_mbconv(layer) if layer.spec.linear else fold_mbconv(layer)
    return layer.clone()


def transform_network(net: Network) -> Network:
    """
    Shallow counterpart of a network: every linear operator collapsed, every
    batch norm folded. Applying it to an already transformed network returns
    an identical copy.
    """
    if net.transformed:
        return net.clone()
    net.release_caches()
    stem = _fold_conv_bn_act(net.stem)
    layers = [transform_layer(layer) for layer in net.layers]
    shallow = Network(net.cfg, net.arch, stem, layers, net.head.clone(), transformed=True)
    shallow.eval()
    report = depth_report(net, shallow)
    logger.debug(
        f"Transformed network: depth {report.depth_before} -> {report.depth_after} "
        f"({report.collapsed} collapsed, {report.folded} folded)"
    )
    return shallow


def depth_report(deep: Network, shallow: Network) -> DepthReport:
    collapsed = sum(isinstance(layer, CollapsedConv) for layer in shallow.layers)
    folded = sum(isinstance(layer, MBConvOperator) for layer in shallow.layers)
    return DepthReport(
        depth_before=deep.depth(),
        depth_after=shallow.depth(),
        searchable_before=deep.searchable_depth(),
        searchable_after=shallow.searchable_depth(),
        collapsed=collapsed,
        folded=folded,
    )


def shallow_skeleton(cfg: SupernetConfig, arch, rng: Optional[np.random.Generator], dtype=np.float32) -> Network:
    """Transformed structure of an architecture with freshly initialised weights."""
    deep = build_network(cfg, arch, rng, dtype)
    deep.eval()
    shallow = transform_network(deep)
    shallow.train()
    return shallow


def verify_equivalence(
    deep: Network,
    shallow: Network,
    n_samples: int = 100,
    tol: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 256,
) -> Dict[str, float]:
    """
    Compare inference logits of two networks on Gaussian inputs.

    Returns:
        Report with max_abs, mean_abs, argmax_agreement and passed
    """
    rng = rng or np.random.default_rng(0)
    c, h, w = deep.cfg.input_shape
    dtype = deep.stem.conv.weight.dtype
    inputs = rng.standard_normal((n_samples, c, h, w)).astype(dtype)
    deep_logits = deep.predict(inputs, batch_size)
    shallow_logits = deep_logits if shallow is deep else shallow.predict(inputs, batch_size)
    diff = np.abs(deep_logits.astype(np.float64) - shallow_logits.astype(np.float64))
    agreement = float(np.mean(np.argmax(deep_logits, axis=1) == np.argmax(shallow_logits, axis=1)))
    report = {
        "n_samples": int(n_samples),
        "tol": float(tol),
        "max_abs": float(diff.max()) if diff.size else 0.0,
        "mean_abs": float(diff.mean()) if diff.size else 0.0,
        "argmax_agreement": agreement,
    }
    report["passed"] = bool(report["max_abs"] <= tol)
    if not report["passed"]:
        logger.warning(f"Equivalence check failed: max_abs {report['max_abs']:.3e} > tol {tol:.1e}")
    return report
