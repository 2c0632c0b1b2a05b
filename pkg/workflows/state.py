"""
State and result containers for the search, training and elastic workflows.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from utils.nas.optim import SGD, Adam
from utils.nas.search_space import Network, Supernet


@dataclass
class TraceRecord:
    """One search iteration."""
    iter: int
    epoch: int
    lam: float
    lat_pred_ms: float
    valid_loss: Optional[float]
    train_loss: float
    alpha_updated: bool

    def to_record(self) -> Dict[str, Any]:
        return {
            "iter": self.iter,
            "epoch": self.epoch,
            "lambda": self.lam,
            "lat_pred_ms": self.lat_pred_ms,
            "valid_loss": self.valid_loss,
            "train_loss": self.train_loss,
            "alpha_updated": self.alpha_updated,
        }


@dataclass
class SearchState:
    """Everything the bi-level search loop mutates."""
    supernet: Supernet
    constraint_ms: float
    rng: np.random.Generator
    weight_optimizer: SGD
    alpha_optimizer: Adam
    lam: float = 0.0
    iteration: int = 0
    epoch: int = 0
    trace: List[TraceRecord] = field(default_factory=list)
    touched: Optional[np.ndarray] = None  # [L, N] count of weight updates per operator

    def __post_init__(self):
        if self.touched is None:
            self.touched = np.zeros(self.supernet.arch.shape, dtype=np.int64)

    @property
    def alpha(self) -> np.ndarray:
        return self.supernet.arch.alpha.data


@dataclass
class SearchResult:
    arch: List[int]
    lam: float
    constraint_ms: float
    predicted_latency_ms: float
    oracle_latency_ms: float
    latency_range_ms: List[float]
    reachable: bool
    strategy: str
    coverage: float
    coverage_first_epoch: Optional[float]
    peak_live_operators: int
    alpha: List[List[float]]
    trace: List[TraceRecord] = field(default_factory=list, repr=False)

    @property
    def latency_error(self) -> float:
        """|LAT - T| / T of the transformed searched network."""
        return abs(self.oracle_latency_ms - self.constraint_ms) / self.constraint_ms

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("trace")
        data["lambda"] = data.pop("lam")
        data["latency_error"] = self.latency_error
        return data


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    eps: Optional[float]
    lr: float

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    network: Network
    history: List[EpochMetrics]
    hybrid: bool
    elastic: bool

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc if self.history else 0.0

    def curve(self) -> List[float]:
        return [m.val_acc for m in self.history]
