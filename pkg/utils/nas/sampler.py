"""
Architecture sampling: softmax relaxation, Gumbel perturbation, top-k
ordering without replacement and the sandwich rule.

A single Gumbel perturbation per iteration ranks every layer's operators by
descending ``log softmax(alpha) + g``. Taking the rank-r operator is the same
as sampling r+1 times without replacement with a re-normalised distribution,
so one draw serves the most important, a random and the least important path
together.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from utils.common.errors import ConfigError
from utils.nas import tensor as T

STRATEGIES = ("darts_softmax", "gdas_single", "topk_full", "sandwich")
GUMBEL_CLIP = 1e-10


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel samples -log(-log(U)) with U clipped to (1e-10, 1 - 1e-10)."""
    u = rng.random(shape)
    u = np.clip(u, GUMBEL_CLIP, 1.0 - GUMBEL_CLIP)
    return -np.log(-np.log(u))


@dataclass
class PathSample:
    """One operator per layer plus the relaxation it was drawn from."""

    indices: List[int]
    u: np.ndarray
    hard: np.ndarray
    candidates: np.ndarray
    straight_through: bool = True

    @property
    def num_layers(self) -> int:
        return len(self.indices)

    def gates(self) -> np.ndarray:
        """Values multiplied onto each layer's output in the forward pass."""
        rows = np.arange(self.num_layers)
        source = self.hard if self.straight_through else self.u
        return source[rows, self.indices]


@dataclass
class SandwichTriple:
    most: PathSample
    random: PathSample
    least: PathSample

    @property
    def paths(self) -> List[PathSample]:
        return [self.most, self.random, self.least]


@dataclass
class TopKOrder:
    """Per-layer ranking of all operators under one Gumbel perturbation."""

    alpha: np.ndarray
    noise: np.ndarray
    tau: float
    logp: np.ndarray = field(init=False)
    ranking: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.logp = T.log_softmax(self.alpha, axis=1)
        self.ranking = np.argsort(-(self.logp + self.noise), axis=1, kind="stable")

    @property
    def shape(self):
        return self.alpha.shape

    def path(self, ranks: Union[int, Sequence[int]], straight_through: bool = True) -> PathSample:
        """
        Select the operator at the given rank of every layer.

        Soft weights are the tempered softmax of the perturbed log-probabilities
        over the operators not yet excluded by higher ranks.
        """
        num_layers, num_ops = self.shape
        ranks = np.full(num_layers, ranks, dtype=int) if np.isscalar(ranks) else np.asarray(ranks, dtype=int)
        rows = np.arange(num_layers)
        indices = self.ranking[rows, ranks]
        position = np.empty_like(self.ranking)
        position[rows[:, None], self.ranking] = np.arange(num_ops)[None, :]
        candidates = position >= ranks[:, None]
        scores = np.where(candidates, (self.logp + self.noise) / self.tau, -np.inf)
        u = T.softmax(scores, axis=1)
        hard = np.zeros_like(u)
        hard[rows, indices] = 1.0
        return PathSample([int(i) for i in indices], u, hard, candidates, straight_through)


def gumbel_topk_order(alpha: np.ndarray, tau: float, rng: np.random.Generator) -> TopKOrder:
    """
    Rank every layer's operators by a fresh Gumbel perturbation.

    Raises:
        ValueError: If tau <= 0
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    alpha = np.asarray(alpha, dtype=np.float64)
    return TopKOrder(alpha, gumbel_noise(alpha.shape, rng), tau)


def iterative_order(alpha_row: np.ndarray, rng: np.random.Generator) -> List[int]:
    """Explicit sampling without replacement, re-normalising after each draw."""
    remaining = list(range(len(alpha_row)))
    probs = T.softmax(np.asarray(alpha_row, dtype=np.float64))
    order = []
    while remaining:
        p = probs[remaining] / probs[remaining].sum()
        pick = remaining[int(rng.choice(len(remaining), p=p))]
        order.append(pick)
        remaining.remove(pick)
    return order


def sandwich_select(order: TopKOrder, rng: np.random.Generator) -> SandwichTriple:
    """
    Most important (rank 0), least important (rank N-1) and a uniformly random
    middle rank per layer.

    Raises:
        ConfigError: With fewer than 3 operators per layer
    """
    num_layers, num_ops = order.shape
    if num_ops < 3:
        raise ConfigError(f"sandwich rule needs at least 3 operators per layer, got {num_ops}",
                          key="search.strategy")
    middle = rng.integers(1, num_ops - 1, size=num_layers)
    return SandwichTriple(order.path(0), order.path(middle), order.path(num_ops - 1))


def single_path_sample(alpha: np.ndarray, tau: float, rng: np.random.Generator) -> PathSample:
    """Rank-0 path of a fresh perturbation (one sampled sub-network per step)."""
    return gumbel_topk_order(alpha, tau, rng).path(0)


def softmax_relaxation(alpha: np.ndarray, x: np.ndarray, layer) -> np.ndarray:
    """Softmax(alpha[layer.index])-weighted sum of every candidate operator output."""
    weights = T.softmax(np.asarray(alpha, dtype=np.float64)[layer.index])
    return layer.forward_mixed(x, weights)


def softmax_alpha_grad(alpha: np.ndarray, mixture_grads: np.ndarray) -> np.ndarray:
    """Chain dL/dweights through the row-wise softmax back to alpha."""
    w = T.softmax(np.asarray(alpha, dtype=np.float64), axis=1)
    return w * (mixture_grads - np.sum(w * mixture_grads, axis=1, keepdims=True))


def straight_through_alpha_grad(order: TopKOrder, path: PathSample, hard_grad: np.ndarray) -> np.ndarray:
    """
    Gradient reaching alpha when dL/d(hard) is passed to the soft weights unchanged.

    Args:
        order: Ranking the path was drawn from (same perturbation)
        path: Selected path with its soft weights
        hard_grad: dL/d(hard) as an [L, N] matrix

    Returns:
        dL/dalpha, shape [L, N]
    """
    c = np.where(path.candidates, np.asarray(hard_grad, dtype=np.float64), 0.0)
    u = path.u
    dz = u * (c - np.sum(c * u, axis=1, keepdims=True))
    dlogp = dz / order.tau
    p = np.exp(order.logp)
    return dlogp - p * np.sum(dlogp, axis=1, keepdims=True)


def selection_entropy(counts: np.ndarray) -> np.ndarray:
    """Per-layer entropy (nats) of empirical selection counts [L, N]."""
    freq = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(freq > 0, freq * np.log(freq), 0.0)
    return -terms.sum(axis=1)


def coverage(touched: np.ndarray) -> float:
    """Fraction of (layer, operator) pairs trained at least once."""
    return float(np.mean(np.asarray(touched) > 0))


def paths_for_strategy(strategy: str, order: TopKOrder, rng: np.random.Generator,
                       top_k: Optional[int] = None) -> List[PathSample]:
    """Paths whose losses are summed in one weight update."""
    if strategy == "gdas_single":
        return [order.path(0)]
    if strategy == "sandwich":
        return sandwich_select(order, rng).paths
    if strategy == "topk_full":
        k = order.shape[1] if top_k is None else top_k
        return [order.path(r) for r in range(k)]
    raise ConfigError(f"strategy '{strategy}' does not sample paths", key="search.strategy")
