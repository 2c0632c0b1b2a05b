"""
Dense tensor primitives with hand-written backward passes.

Activations flow between layers as plain ``numpy.ndarray`` values in NCHW
layout; :class:`Tensor` is the value type for anything that owns a gradient
slot (weights, biases, architecture parameters, BN statistics).

Every differentiable primitive comes as a ``*_forward`` function returning the
output plus a cache and a ``*_backward`` function consuming that cache. The
convenience wrappers (``conv2d``, ``batch_norm``, ...) return only the output.
"""

from dataclasses import dataclass
from typing import Any, Optional, Tuple

import numpy as np

from utils.common.errors import DataFormatError, DegenerateBatchError, ShapeMismatchError

DEFAULT_DTYPE = np.float32
RELU6_CAP = 6.0
BN_MODES = ("train", "batch", "infer", "calibrate", "accumulate")


class Tensor:
    """Contiguous array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data: Any, name: str = "", dtype: Optional[np.dtype] = None):
        array = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        if array.ndim > 4:
            raise ShapeMismatchError("Tensor", ["rank"], "<= 4", array.ndim)
        self.data = np.ascontiguousarray(array)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeMismatchError("Tensor.accumulate_grad", [self.name or "grad"], self.data.shape, grad.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def astype(self, dtype: np.dtype) -> "Tensor":
        """Convert storage in place (drops the gradient)."""
        self.data = np.ascontiguousarray(self.data.astype(dtype))
        self.grad = None
        return self

    def copy(self) -> "Tensor":
        clone = Tensor(self.data, name=self.name)
        if self.grad is not None:
            clone.grad = self.grad.copy()
        return clone

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class ConvWeights:
    """
    Convolution parameters.

    ``weight`` uses the layout [C_in, C_out / groups, K, K]: for ungrouped
    convolutions that is [C_in, C_out, K, K]; a depthwise convolution
    (groups == C_in == C_out) stores [C, 1, K, K].
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    def validate(self) -> None:
        shape = self.weight.shape
        if len(shape) != 4 or shape[2] != shape[3]:
            raise ShapeMismatchError("ConvWeights", ["kernel"], "[C_in, C_out/groups, K, K]", shape)
        if shape[2] % 2 != 1:
            raise ShapeMismatchError("ConvWeights", ["kernel"], "odd K", shape[2])
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeMismatchError("ConvWeights", ["stride", "padding", "groups"],
                                     "stride>=1, padding>=0, groups>=1",
                                     (self.stride, self.padding, self.groups))
        if shape[0] % self.groups != 0:
            raise ShapeMismatchError("ConvWeights", ["C_in", "groups"], f"C_in divisible by {self.groups}", shape[0])
        if self.bias.shape != (self.out_channels,):
            raise ShapeMismatchError("ConvWeights", ["bias"], (self.out_channels,), self.bias.shape)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1

    def output_channel_index(self) -> np.ndarray:
        """Output channel of every (c_in, c_out_local) weight slice."""
        cin_g = self.in_channels // self.groups
        cout_g = self.weight.shape[1]
        group = np.arange(self.in_channels) // cin_g
        return group[:, None] * cout_g + np.arange(cout_g)[None, :]


@dataclass
class BatchNormState:
    """Batch norm affine parameters, running statistics and mode."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @property
    def num_channels(self) -> int:
        return self.gamma.shape[0]


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

@dataclass
class ConvCache:
    weights: ConvWeights
    x_shape: Tuple[int, ...]
    padded_shape: Tuple[int, ...]
    windows: np.ndarray
    out_hw: Tuple[int, int]


def _check_conv_input(x: np.ndarray, weights: ConvWeights, op: str) -> Tuple[int, int]:
    if x.ndim != 4:
        raise ShapeMismatchError(op, ["rank"], 4, x.ndim)
    if x.shape[1] != weights.in_channels:
        raise ShapeMismatchError(op, ["C_in"], weights.in_channels, x.shape[1])
    out_h = weights.output_size(x.shape[2])
    out_w = weights.output_size(x.shape[3])
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(op, ["H", "W"], f">= {weights.kernel_size - 2 * weights.padding}",
                                 x.shape[2:])
    return out_h, out_w


def _windows(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, out_h, out_w, kernel, kernel),
        (sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, weights: ConvWeights) -> Tuple[np.ndarray, ConvCache]:
    """
    Grouped 2-D cross-correlation with zero padding.

    Args:
        x: Input [N, C_in, H, W]
        weights: Convolution parameters

    Returns:
        Output [N, C_out, H', W'] and the cache for :func:`conv2d_backward`

    Raises:
        ShapeMismatchError: If channels or spatial sizes are incompatible
    """
    out_h, out_w = _check_conv_input(x, weights, "conv2d")
    k, s, p, g = weights.kernel_size, weights.stride, weights.padding, weights.groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    xp = np.ascontiguousarray(xp)
    windows = _windows(xp, k, s, out_h, out_w)

    n = x.shape[0]
    cin_g = weights.in_channels // g
    cout_g = weights.weight.shape[1]
    grouped = windows.reshape(n, g, cin_g, out_h, out_w, k, k)
    w = weights.weight.data.reshape(g, cin_g, cout_g, k, k)
    out = np.einsum("ngihwkl,giokl->ngohw", grouped, w, optimize=True)
    out = out.reshape(n, g * cout_g, out_h, out_w)
    out = out + weights.bias.data[None, :, None, None]
    cache = ConvCache(weights, x.shape, xp.shape, windows, (out_h, out_w))
    return out, cache


def conv2d_backward(dout: np.ndarray, cache: ConvCache) -> np.ndarray:
    """
    Backward pass of :func:`conv2d_forward`.

    Accumulates into ``weight.grad`` and ``bias.grad``.

    Returns:
        Gradient with respect to the input
    """
    weights = cache.weights
    k, s, p, g = weights.kernel_size, weights.stride, weights.padding, weights.groups
    n = cache.x_shape[0]
    out_h, out_w = cache.out_hw
    cin = weights.in_channels
    cin_g = cin // g
    cout_g = weights.weight.shape[1]

    dout_g = dout.reshape(n, g, cout_g, out_h, out_w)
    grouped = cache.windows.reshape(n, g, cin_g, out_h, out_w, k, k)
    w = weights.weight.data.reshape(g, cin_g, cout_g, k, k)

    dw = np.einsum("ngihwkl,ngohw->giokl", grouped, dout_g, optimize=True).reshape(weights.weight.shape)
    weights.weight.accumulate_grad(dw)
    weights.bias.accumulate_grad(dout.sum(axis=(0, 2, 3)))

    dwin = np.einsum("ngohw,giokl->ngihwkl", dout_g, w, optimize=True).reshape(n, cin, out_h, out_w, k, k)
    dxp = np.zeros(cache.padded_shape, dtype=dout.dtype)
    h_span = s * (out_h - 1) + 1
    w_span = s * (out_w - 1) + 1
    for kh in range(k):
        for kw in range(k):
            dxp[:, :, kh:kh + h_span:s, kw:kw + w_span:s] += dwin[:, :, :, :, kh, kw]
    h, wd = cache.x_shape[2:]
    return dxp[:, :, p:p + h, p:p + wd]


def conv2d(x: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Forward-only convolution."""
    return conv2d_forward(x, weights)[0]


def conv2d_reference(x: np.ndarray, weights: ConvWeights) -> np.ndarray:
    """Direct loop convolution used as the correctness oracle for the fast path."""
    out_h, out_w = _check_conv_input(x, weights, "conv2d_reference")
    k, s, p, g = weights.kernel_size, weights.stride, weights.padding, weights.groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cin_g = weights.in_channels // g
    cout_g = weights.weight.shape[1]
    out = np.zeros((x.shape[0], weights.out_channels, out_h, out_w), dtype=x.dtype)
    for co in range(weights.out_channels):
        group, co_local = divmod(co, cout_g)
        channels = slice(group * cin_g, (group + 1) * cin_g)
        kernel = weights.weight.data[channels, co_local]
        for i in range(out_h):
            for j in range(out_w):
                patch = xp[:, channels, i * s:i * s + k, j * s:j * s + k]
                out[:, co, i, j] = np.sum(patch * kernel, axis=(1, 2, 3)) + weights.bias.data[co]
    return out


# --------------------------------------------------------------------------
# Batch norm
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    state: BatchNormState
    x_hat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


def batch_norm_forward(x: np.ndarray, bn: BatchNormState) -> Tuple[np.ndarray, BatchNormCache]:
    """
    Batch normalisation over (N, H, W) per channel.

    ``train`` normalises with biased batch statistics and updates the running
    statistics with the stored momentum; ``calibrate`` normalises with batch
    statistics and stores them as the running statistics exactly; ``batch``
    normalises with batch statistics and leaves the running statistics alone.
    ``infer`` and ``accumulate`` use the running statistics.

    Raises:
        ShapeMismatchError: Channel count mismatch
        DegenerateBatchError: Batch of size < 2 with batch statistics
    """
    if x.ndim != 4 or x.shape[1] != bn.num_channels:
        raise ShapeMismatchError("batch_norm", ["C"], bn.num_channels, x.shape[1] if x.ndim > 1 else x.shape)
    if bn.mode not in BN_MODES:
        raise ValueError(f"Unknown batch norm mode '{bn.mode}'")

    use_batch = bn.mode in ("train", "batch", "calibrate")
    if use_batch:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"batch_norm in '{bn.mode}' mode needs a batch of at least 2, got {x.shape[0]}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if bn.mode == "train":
            m = bn.momentum
            bn.running_mean.data = ((1.0 - m) * bn.running_mean.data + m * mean).astype(bn.running_mean.dtype)
            bn.running_var.data = ((1.0 - m) * bn.running_var.data + m * var).astype(bn.running_var.dtype)
        elif bn.mode == "calibrate":
            bn.running_mean.data = mean.astype(bn.running_mean.dtype)
            bn.running_var.data = var.astype(bn.running_var.dtype)
    else:
        mean = bn.running_mean.data
        var = bn.running_var.data

    inv_std = 1.0 / np.sqrt(var + bn.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = bn.gamma.data[None, :, None, None] * x_hat + bn.beta.data[None, :, None, None]
    return out.astype(x.dtype, copy=False), BatchNormCache(bn, x_hat, inv_std, use_batch)


def batch_norm_backward(dout: np.ndarray, cache: BatchNormCache) -> np.ndarray:
    """Backward pass of :func:`batch_norm_forward` (batch or running statistics)."""
    bn = cache.state
    x_hat = cache.x_hat
    bn.gamma.accumulate_grad(np.sum(dout * x_hat, axis=(0, 2, 3)))
    bn.beta.accumulate_grad(dout.sum(axis=(0, 2, 3)))

    gamma = bn.gamma.data[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    dx_hat = dout * gamma
    if not cache.batch_stats:
        return dx_hat * inv_std
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dx_hat = dx_hat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx_hat_xhat = np.sum(dx_hat * x_hat, axis=(0, 2, 3), keepdims=True)
    return inv_std / count * (count * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)


def batch_norm(x: np.ndarray, bn: BatchNormState) -> np.ndarray:
    return batch_norm_forward(x, bn)[0]


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def relu6_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """min(max(x, 0), 6); the subgradient is 0 at both kinks."""
    mask = (x > 0) & (x < RELU6_CAP)
    return np.clip(x, 0.0, RELU6_CAP).astype(x.dtype, copy=False), mask


def relu6_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def relu6(x: np.ndarray) -> np.ndarray:
    return relu6_forward(x)[0]


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def grafted_activation_forward(x: np.ndarray, eps: float) -> Tuple[np.ndarray, Any]:
    """
    Blend of ReLU6 and identity: relu6(x) + eps * (x - relu6(x)).

    eps == 0 returns relu6(x) and eps == 1 returns ``x`` itself, both exactly.

    Raises:
        ValueError: If eps lies outside [0, 1]
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"grafted activation eps must lie in [0, 1], got {eps}")
    if eps == 1.0:
        return x, None
    activated, mask = relu6_forward(x)
    if eps == 0.0:
        return activated, (mask, 0.0)
    out = activated + x.dtype.type(eps) * (x - activated)
    return out, (mask, eps)


def grafted_activation_backward(dout: np.ndarray, cache: Any) -> np.ndarray:
    if cache is None:
        return dout
    mask, eps = cache
    if eps == 0.0:
        return dout * mask
    slope = (1.0 - eps) * mask + eps
    return dout * slope.astype(dout.dtype, copy=False)


def grafted_activation(x: np.ndarray, eps: float) -> np.ndarray:
    return grafted_activation_forward(x, eps)[0]


# --------------------------------------------------------------------------
# Dense layers, pooling and losses
# --------------------------------------------------------------------------

def fully_connected_forward(x: np.ndarray, w: Tensor, b: Tensor) -> Tuple[np.ndarray, Tuple]:
    """Affine map x @ W + b with W stored as [D, M]."""
    if x.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError("fully_connected", ["D"], w.shape[0] if w.data.ndim == 2 else w.shape, x.shape)
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError("fully_connected", ["M"], (w.shape[1],), b.shape)
    return x @ w.data + b.data, (x, w, b)


def fully_connected_backward(dout: np.ndarray, cache: Tuple) -> np.ndarray:
    x, w, b = cache
    w.accumulate_grad(x.T @ dout)
    b.accumulate_grad(dout.sum(axis=0))
    return dout @ w.data.T


def fully_connected(x: np.ndarray, w: Tensor, b: Tensor) -> np.ndarray:
    return fully_connected_forward(x, w, b)[0]


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    if x.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", ["rank"], 4, x.ndim)
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout: np.ndarray, x_shape: Tuple[int, ...]) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), x_shape).astype(dout.dtype)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return global_avg_pool_forward(x)[0]


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy over the batch.

    Returns:
        (loss, gradient with respect to the logits)

    Raises:
        DataFormatError: If a label lies outside [0, classes)
    """
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError("softmax_cross_entropy", ["N"], (n,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataFormatError(f"label out of range [0, {classes}): min {labels.min()}, max {labels.max()}")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)


def kl_divergence(student_logits: np.ndarray, teacher_logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Batch-mean KL(teacher || student) between softmax distributions.

    The teacher is a constant: only the student gradient is returned.

    Returns:
        (loss, gradient with respect to the student logits)
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatchError("kl_divergence", ["N", "classes"], teacher_logits.shape, student_logits.shape)
    n = student_logits.shape[0]
    log_p_student = log_softmax(student_logits, axis=1)
    log_p_teacher = log_softmax(teacher_logits, axis=1)
    p_teacher = np.exp(log_p_teacher)
    loss = float(np.sum(p_teacher * (log_p_teacher - log_p_student)) / n)
    grad = (np.exp(log_p_student) - p_teacher) / n
    return loss, grad.astype(student_logits.dtype, copy=False)
