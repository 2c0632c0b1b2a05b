"""
Layer objects built on the tensor primitives.

Each layer caches what its backward pass needs during ``forward`` and releases
it in ``backward``; gradients accumulate into the owning :class:`Tensor`.
"""

import copy
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from utils.common.errors import ShapeMismatchError
from utils.nas import tensor as T
from utils.nas.tensor import BatchNormState, ConvWeights, Tensor


class ActivationTracker:
    """Counts searchable operators currently holding forward caches."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def acquire(self) -> None:
        self.live += 1
        self.peak = max(self.peak, self.live)

    def release(self) -> None:
        self.live = max(self.live - 1, 0)

    def reset(self) -> None:
        self.live = 0
        self.peak = 0


ACTIVATIONS = ActivationTracker()


class Module:
    """Base class with parameter, buffer and child registration."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_cache", None)

    def __setattr__(self, name, value):
        params = self.__dict__.get("_parameters")
        if params is None:
            raise AttributeError("Module.__init__() must run before attribute assignment")
        buffers, modules = self._buffers, self._modules
        if name in buffers:
            buffers[name] = value
        elif isinstance(value, Tensor):
            params[name] = value
            modules.pop(name, None)
        elif isinstance(value, Module):
            modules[name] = value
            params.pop(name, None)
        elif value is None and (name in modules or name in params):
            modules.pop(name, None)
            params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: Tensor) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal -----------------------------------------------------------

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, module in self._modules.items():
            if module is not None:
                yield name, module

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield (f"{prefix}.{name}" if prefix else name), param
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, buf in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), buf
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    # -- state -----------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
            if isinstance(module, BatchNorm2d):
                module.set_mode("train" if mode else "infer")
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_bn_mode(self, mode: str) -> "Module":
        for _, module in self.named_modules():
            if isinstance(module, BatchNorm2d):
                module.set_mode(mode)
        return self

    def batch_norms(self) -> List[Tuple[str, "BatchNorm2d"]]:
        return [(name, m) for name, m in self.named_modules() if isinstance(m, BatchNorm2d)]

    def bn_statistics(self) -> Dict[str, Dict[str, np.ndarray]]:
        """Running statistics of every batch norm layer, keyed by module path."""
        stats = {}
        for name, bn in self.batch_norms():
            mean, var = bn.statistics()
            stats[name] = {"mean": mean, "var": var}
        return stats

    def load_bn_statistics(self, stats: Dict[str, Dict[str, np.ndarray]]) -> None:
        layers = dict(self.batch_norms())
        missing = sorted(set(layers) - set(stats))
        if missing:
            raise ShapeMismatchError("load_bn_statistics", ["layers"], sorted(layers), f"missing {missing[:5]}")
        for name, bn in layers.items():
            bn.load_statistics(stats[name]["mean"], stats[name]["var"])

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def release_caches(self) -> None:
        for _, module in self.named_modules():
            if module._cache is not None and isinstance(module, TrackedModule):
                ACTIVATIONS.release()
            object.__setattr__(module, "_cache", None)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.data.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into parameters and buffers, keeping each tensor's dtype.

        Raises:
            ShapeMismatchError: On a shape mismatch, or a missing/unexpected key in strict mode
        """
        targets = dict(self.named_parameters())
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise ShapeMismatchError("load_state_dict", ["keys"], f"missing={missing[:5]}",
                                         f"unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in targets:
                continue
            target = targets[name]
            if tuple(value.shape) != target.shape:
                raise ShapeMismatchError("load_state_dict", [name], target.shape, tuple(value.shape))
            target.data = np.ascontiguousarray(np.asarray(value, dtype=target.dtype))
            target.grad = None

    def astype(self, dtype) -> "Module":
        for _, param in self.named_parameters():
            param.astype(dtype)
        for _, buf in self.named_buffers():
            buf.astype(dtype)
        return self

    def clone(self) -> "Module":
        self.release_caches()
        return copy.deepcopy(self)

    # -- computation -----------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class TrackedModule(Module):
    """Module whose live forward caches count towards the activation proxy."""

    def _hold(self, cache) -> None:
        if self._cache is None:
            ACTIVATIONS.acquire()
        object.__setattr__(self, "_cache", cache)

    def _drop(self):
        cache = self._cache
        if cache is not None:
            ACTIVATIONS.release()
        object.__setattr__(self, "_cache", None)
        return cache


class ModuleList(Module):
    """Indexed container of child modules registered as '0', '1', ..."""

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self)), module)

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> Module:
        if index < 0:
            index += len(self)
        return self._modules[str(index)]

    def __setitem__(self, index: int, module: Module) -> None:
        setattr(self, str(index), module)

    def __iter__(self):
        return iter([self._modules[str(i)] for i in range(len(self))])


class Conv2d(Module):
    """Convolution layer; weight layout [C_in, C_out / groups, K, K]."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype=T.DEFAULT_DTYPE,
    ):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeMismatchError("Conv2d", ["C_in", "C_out", "groups"], f"divisible by {groups}",
                                     (in_channels, out_channels))
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        shape = (in_channels, out_channels // groups, kernel_size, kernel_size)
        if rng is None:
            weight = np.zeros(shape, dtype=dtype)
        else:
            weight = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.weight = Tensor(weight, name="weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), name="bias")
        self.weights.validate()

    @classmethod
    def from_weights(cls, weights: ConvWeights) -> "Conv2d":
        layer = cls(weights.in_channels, weights.out_channels, weights.kernel_size,
                    stride=weights.stride, padding=weights.padding, groups=weights.groups,
                    dtype=weights.weight.dtype)
        layer.weight = weights.weight
        layer.bias = weights.bias
        return layer

    @property
    def weights(self) -> ConvWeights:
        return ConvWeights(self.weight, self.bias, self.stride, self.padding, self.groups)

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    def forward(self, x):
        out, cache = T.conv2d_forward(x, self.weights)
        object.__setattr__(self, "_cache", cache)
        return out

    def backward(self, dout):
        cache = self._cache
        object.__setattr__(self, "_cache", None)
        return T.conv2d_backward(dout, cache)


class BatchNorm2d(Module):
    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), name="gamma")
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), name="beta")
        self.register_buffer("running_mean", Tensor(np.zeros(num_channels, dtype=dtype), name="running_mean"))
        self.register_buffer("running_var", Tensor(np.ones(num_channels, dtype=dtype), name="running_var"))
        self.eps = eps
        self.momentum = momentum
        self.mode = "train"
        object.__setattr__(self, "_moments", None)

    @property
    def state(self) -> BatchNormState:
        """View sharing this layer's tensors."""
        return BatchNormState(self.gamma, self.beta, self.running_mean, self.running_var,
                              self.eps, self.momentum, self.mode)

    def set_mode(self, mode: str) -> None:
        if mode not in T.BN_MODES:
            raise ValueError(f"Unknown batch norm mode '{mode}'")
        self.mode = mode
        if mode == "accumulate":
            object.__setattr__(self, "_moments", None)

    def forward(self, x):
        if self.mode == "accumulate":
            self._accumulate(x)
        out, cache = T.batch_norm_forward(x, self.state)
        object.__setattr__(self, "_cache", cache)
        return out

    def backward(self, dout):
        cache = self._cache
        object.__setattr__(self, "_cache", None)
        return T.batch_norm_backward(dout, cache)

    def statistics(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.running_mean.data.copy(), self.running_var.data.copy()

    def load_statistics(self, mean: np.ndarray, var: np.ndarray) -> None:
        dtype = self.running_mean.dtype
        self.running_mean.data = np.asarray(mean, dtype=dtype).copy()
        self.running_var.data = np.asarray(var, dtype=dtype).copy()

    def _accumulate(self, x: np.ndarray) -> None:
        # per-channel count, mean and sum of squared deviations, merged pairwise
        x64 = x.astype(np.float64)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x64.mean(axis=(0, 2, 3))
        m2 = np.square(x64 - mean[None, :, None, None]).sum(axis=(0, 2, 3))
        if self._moments is None:
            object.__setattr__(self, "_moments", (count, mean, m2))
            return
        n_a, mean_a, m2_a = self._moments
        total = n_a + count
        delta = mean - mean_a
        merged = (total, mean_a + delta * count / total, m2_a + m2 + delta * delta * n_a * count / total)
        object.__setattr__(self, "_moments", merged)

    def finish_accumulation(self) -> None:
        """Store the accumulated population statistics (biased variance) and switch to ``infer``."""
        if self._moments is None:
            raise ValueError("No batches were accumulated")
        count, mean, m2 = self._moments
        object.__setattr__(self, "_moments", None)
        self.load_statistics(mean, m2 / count)
        self.mode = "infer"


class ReLU6(Module):
    def forward(self, x):
        out, mask = T.relu6_forward(x)
        object.__setattr__(self, "_cache", mask)
        return out

    def backward(self, dout):
        mask = self._cache
        object.__setattr__(self, "_cache", None)
        return T.relu6_backward(dout, mask)


class ReLU(Module):
    def forward(self, x):
        out, mask = T.relu_forward(x)
        object.__setattr__(self, "_cache", mask)
        return out

    def backward(self, dout):
        mask = self._cache
        object.__setattr__(self, "_cache", None)
        return T.relu_backward(dout, mask)


class GraftedActivation(Module):
    """ReLU6 blended towards identity by ``eps`` (identity at eps == 1)."""

    def __init__(self, eps: float = 1.0):
        super().__init__()
        self.eps = float(eps)

    @property
    def is_identity(self) -> bool:
        return self.eps == 1.0

    def forward(self, x):
        out, cache = T.grafted_activation_forward(x, self.eps)
        object.__setattr__(self, "_cache", ("grafted", cache))
        return out

    def backward(self, dout):
        _, cache = self._cache
        object.__setattr__(self, "_cache", None)
        return T.grafted_activation_backward(dout, cache)


class Linear(Module):
    """Fully connected layer, weight stored as [D, M]."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 dtype=T.DEFAULT_DTYPE, gain: float = 2.0):
        super().__init__()
        if rng is None:
            weight = np.zeros((in_features, out_features), dtype=dtype)
        else:
            weight = (rng.standard_normal((in_features, out_features)) * np.sqrt(gain / in_features)).astype(dtype)
        self.weight = Tensor(weight, name="weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), name="bias")

    def forward(self, x):
        out, cache = T.fully_connected_forward(x, self.weight, self.bias)
        object.__setattr__(self, "_cache", cache)
        return out

    def backward(self, dout):
        cache = self._cache
        object.__setattr__(self, "_cache", None)
        return T.fully_connected_backward(dout, cache)


class GlobalAvgPool(Module):
    def forward(self, x):
        out, shape = T.global_avg_pool_forward(x)
        object.__setattr__(self, "_cache", shape)
        return out

    def backward(self, dout):
        shape = self._cache
        object.__setattr__(self, "_cache", None)
        return T.global_avg_pool_backward(dout, shape)


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.blocks = ModuleList(modules)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def backward(self, dout):
        for block in reversed(list(self.blocks)):
            dout = block.backward(dout)
        return dout


class ConvBNAct(Module):
    """Convolution, optional batch norm, optional activation."""

    def __init__(self, conv: Conv2d, bn: Optional[BatchNorm2d] = None, act: Optional[Module] = None):
        super().__init__()
        self.conv = conv
        self.bn = bn
        self.act = act

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.act is not None:
            x = self.act(x)
        return x

    def backward(self, dout):
        if self.act is not None:
            dout = self.act.backward(dout)
        if self.bn is not None:
            dout = self.bn.backward(dout)
        return self.conv.backward(dout)


class ClassifierHead(Module):
    """Global average pooling followed by a fully connected classifier."""

    def __init__(self, in_channels: int, num_classes: int, rng: Optional[np.random.Generator] = None,
                 dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.pool = GlobalAvgPool()
        self.fc = Linear(in_channels, num_classes, rng=rng, dtype=dtype, gain=1.0)

    def forward(self, x):
        return self.fc(self.pool(x))

    def backward(self, dout):
        return self.pool.backward(self.fc.backward(dout))


def clip_gradients(params: List[Tensor], max_norm: float) -> float:
    """
    Scale gradients in place so that their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total
