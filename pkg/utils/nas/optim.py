"""
Optimizers: momentum SGD for network weights, Adam for architecture
parameters and the latency predictor.
"""

from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.common.errors import NumericalError
from utils.nas.tensor import Tensor

NamedParams = Sequence[Tuple[str, Tensor]]


def _named(params: Union[Iterable[Tuple[str, Tensor]], Iterable[Tensor]]) -> List[Tuple[str, Tensor]]:
    named = []
    for i, item in enumerate(params):
        if isinstance(item, Tensor):
            named.append((item.name or f"param{i}", item))
        else:
            named.append((item[0], item[1]))
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise ValueError("optimizer parameter names must be unique")
    return named


def _check_finite(grads: Sequence[Optional[np.ndarray]], names: Sequence[str], optimizer: str) -> None:
    for name, grad in zip(names, grads):
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericalError(f"{optimizer}: non-finite gradient for '{name}', update rejected",
                                 context={"parameter": name})


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: List[Optional[np.ndarray]],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """
    In-place momentum SGD: v <- momentum * v + g; p <- p - lr * (v + weight_decay * p).

    Parameters whose gradient is None are skipped.
    """
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        velocity = state[i]
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = momentum * velocity + grad
        state[i] = velocity.astype(param.dtype, copy=False)
        param.data = (param.data - lr * (state[i] + weight_decay * param.data)).astype(param.dtype, copy=False)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: Dict[str, list],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """
    In-place bias-corrected Adam with an L2 term added to the gradient.

    ``state`` holds ``step`` (int) and per-parameter lists ``m`` and ``v``.
    """
    beta1, beta2 = betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if weight_decay:
            grad = grad + weight_decay * param.data
        m = state["m"][i] if state["m"][i] is not None else np.zeros_like(param.data)
        v = state["v"][i] if state["v"][i] is not None else np.zeros_like(param.data)
        m = (beta1 * m + (1.0 - beta1) * grad).astype(param.dtype, copy=False)
        v = (beta2 * v + (1.0 - beta2) * grad * grad).astype(param.dtype, copy=False)
        state["m"][i], state["v"][i] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)


class SGD:
    """Momentum SGD over a fixed list of named parameters."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.named_params = _named(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: List[Optional[np.ndarray]] = [None] * len(self.named_params)

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named_params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        grads = [p.grad for p in self.params]
        _check_finite(grads, [n for n, _ in self.named_params], "SGD")
        sgd_momentum_step(self.params, grads, self.velocity, self.lr if lr is None else lr,
                          self.momentum, self.weight_decay)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"sgd.velocity.{name}": v.copy()
                for (name, _), v in zip(self.named_params, self.velocity) if v is not None}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for i, (name, param) in enumerate(self.named_params):
            key = f"sgd.velocity.{name}"
            self.velocity[i] = np.asarray(state[key], dtype=param.dtype).copy() if key in state else None


class Adam:
    """Bias-corrected Adam; rejects non-finite gradients."""

    def __init__(self, params, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.named_params = _named(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        n = len(self.named_params)
        self.state: Dict[str, list] = {"step": 0, "m": [None] * n, "v": [None] * n}

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named_params]

    @property
    def step_count(self) -> int:
        return self.state["step"]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        grads = [p.grad for p in self.params]
        _check_finite(grads, [n for n, _ in self.named_params], "Adam")
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr,
                  self.betas, self.eps, self.weight_decay)

    def state_dict(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for i, (name, _) in enumerate(self.named_params):
            if self.state["m"][i] is not None:
                arrays[f"adam.m.{name}"] = self.state["m"][i].copy()
                arrays[f"adam.v.{name}"] = self.state["v"][i].copy()
        return arrays

    def load_state_dict(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        self.state["step"] = int(step)
        for i, (name, param) in enumerate(self.named_params):
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key in arrays:
                self.state["m"][i] = np.asarray(arrays[m_key], dtype=param.dtype).copy()
                self.state["v"][i] = np.asarray(arrays[v_key], dtype=param.dtype).copy()
            else:
                self.state["m"][i] = self.state["v"][i] = None


def cosine_lr(base_lr: float, iteration: int, total_iterations: int) -> float:
    """Cosine decay from ``base_lr`` to 0 over ``total_iterations``."""
    if total_iterations <= 0:
        return base_lr
    progress = min(iteration / total_iterations, 1.0)
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * progress))
