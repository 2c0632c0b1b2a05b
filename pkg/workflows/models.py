"""
Pydantic models for the experiment configuration.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.common.config_loader import config_hash, load_config
from utils.common.errors import ConfigError
from utils.nas.latency import OracleParams
from utils.nas.sampler import STRATEGIES
from utils.nas.search_space import SupernetConfig

Strategy = Literal["darts_softmax", "gdas_single", "topk_full", "sandwich"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Section):
    """Synthetic dataset shape and the train/valid split."""

    count: int = Field(5000, gt=0, description="Number of images")
    classes: int = Field(10, gt=1, description="Number of classes")
    channels: int = Field(3, gt=0)
    height: int = Field(32, gt=0)
    width: int = Field(32, gt=0)
    noise: float = Field(0.1, ge=0, description="Std of the additive Gaussian pixel noise")
    valid_fraction: float = Field(0.2, gt=0, lt=1, description="Held-out fraction for alpha updates and validation")


class SearchConfig(_Section):
    """Hardware-aware bi-level search."""

    constraint_ms: Optional[float] = Field(
        None, gt=0, description="Latency constraint T; midpoint of the reachable range when unset"
    )
    eta_w: float = Field(0.1, gt=0, description="Initial SGD learning rate of the supernet weights (cosine decay)")
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(3e-5, ge=0)
    eta_alpha: float = Field(0.001, gt=0, description="Adam learning rate of the architecture parameters")
    alpha_weight_decay: float = Field(1e-3, ge=0)
    eta_lambda: float = Field(0.0005, gt=0, description="Gradient-ascent rate of the latency multiplier")
    lambda_init: float = 0.0
    lambda_mode: Literal["learnable", "fixed"] = "learnable"
    clamp_lambda: bool = Field(False, description="Clamp the multiplier at zero")
    alpha_freeze_epochs: int = Field(3, ge=0)
    epochs: int = Field(30, gt=0)
    batch_size: int = Field(64, ge=2)
    strategy: Strategy = "sandwich"
    tau: float = Field(5.0, gt=0, description="Gumbel-softmax temperature")
    grad_clip: float = Field(5.0, ge=0, description="Global gradient-norm clip of the weight step (0 disables)")
    max_steps_per_epoch: Optional[int] = Field(None, gt=0)


class PredictorConfig(_Section):
    """Latency pair generation and MLP predictor training."""

    n_pairs: int = Field(1000, gt=0)
    train_fraction: float = Field(0.8, gt=0, le=1)
    epochs: int = Field(300, gt=0)
    batch_size: int = Field(64, gt=0)
    lr: float = Field(1e-3, gt=0)
    hidden: List[int] = Field(default_factory=lambda: [256, 128])
    learning_curve: List[int] = Field(default_factory=list, description="Training-set sizes for the learning curve")

    @field_validator("hidden")
    @classmethod
    def _positive_hidden(cls, value):
        if not value or any(h <= 0 for h in value):
            raise ValueError("hidden sizes must be positive")
        return value


class TrainConfig(_Section):
    """Stand-alone training of the searched network."""

    epochs: int = Field(30, gt=0)
    grafting_epochs: int = Field(10, ge=0, description="E_total: epochs over which grafted non-linearity is removed")
    lr: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(4e-5, ge=0)
    batch_size: int = Field(64, ge=2)
    grad_clip: float = Field(5.0, ge=0)
    random_flip: bool = True
    hybrid: bool = True
    elastic: bool = True

    @model_validator(mode="after")
    def _check_grafting(self):
        if self.grafting_epochs > self.epochs:
            raise ValueError(f"grafting_epochs ({self.grafting_epochs}) exceeds epochs ({self.epochs})")
        return self


class ElasticConfig(_Section):
    """Multi-resolution training and BN calibration."""

    r_min: int = Field(16, gt=0)
    r_max: int = Field(32, gt=0)
    step: int = Field(8, gt=0)
    distill: bool = True
    full_grid: bool = Field(False, description="Average over every grid resolution instead of the sandwich")
    n_calib: int = Field(1000, gt=0, description="Training images per resolution for BN calibration")
    calib_batch: int = Field(256, ge=2, description="Images per calibration chunk; statistics stay exact")
    calibrate: bool = True

    @model_validator(mode="after")
    def _check_grid(self):
        for name in ("r_min", "r_max", "step"):
            if getattr(self, name) % 8:
                raise ValueError(f"{name} must be a multiple of 8")
        if self.r_min > self.r_max:
            raise ValueError("r_min must not exceed r_max")
        return self


class VerifyConfig(_Section):
    n_samples: int = Field(100, gt=0)
    tol: float = Field(1e-3, gt=0)
    tol_f64: float = Field(1e-10, gt=0)


class AblationConfig(_Section):
    """Budgets of the desk-scale ablation studies."""

    studies: List[Literal["strategies", "elastic", "hybrid", "lambda", "order"]] = Field(
        default_factory=lambda: ["strategies", "elastic", "hybrid", "lambda", "order"]
    )
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    strategies: List[Strategy] = Field(default_factory=lambda: list(STRATEGIES))
    search_epochs: int = Field(2, gt=0)
    train_epochs: int = Field(6, gt=0)
    max_steps_per_epoch: Optional[int] = Field(20, gt=0)
    fixed_lambdas: List[float] = Field(default_factory=lambda: [0.0, 0.5, 2.0])


class ExperimentConfig(_Section):
    """Complete experiment: every field has a desk-scale default."""

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    supernet: SupernetConfig = Field(default_factory=SupernetConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    latency_oracle: OracleParams = Field(default_factory=OracleParams)
    latency_predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    elastic: ElasticConfig = Field(default_factory=ElasticConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/desk"

    @model_validator(mode="after")
    def _check_cross_section(self):
        c, h, w = self.supernet.input_shape
        if (self.dataset.channels, self.dataset.height, self.dataset.width) != (c, h, w):
            raise ValueError(
                f"dataset shape {(self.dataset.channels, self.dataset.height, self.dataset.width)} "
                f"does not match supernet input {(c, h, w)}"
            )
        if self.supernet.num_classes != self.dataset.classes:
            raise ValueError("supernet.num_classes must equal dataset.classes")
        if self.elastic.r_max > h:
            raise ValueError(f"elastic.r_max ({self.elastic.r_max}) exceeds the native resolution {h}")
        if self.elastic.r_min % self.supernet.min_resolution:
            raise ValueError(
                f"elastic.r_min ({self.elastic.r_min}) is not divisible by the total stride "
                f"{self.supernet.min_resolution}"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def stamp(self) -> Dict[str, Any]:
        """Seed and config hash embedded in every artifact."""
        return {"seed": self.seed, "config_hash": self.hash}


def _error_key(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def validate_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw config dictionary.

    Raises:
        ConfigError: Naming the first offending key
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_key(first) or "<root>"
        if first.get("type") == "extra_forbidden":
            message = f"Unknown config key '{key}'"
        else:
            message = f"Invalid config value for '{key}': {first.get('msg')}"
        raise ConfigError(message, key=key) from e


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment config, applying dotted-key overrides.

    Args:
        path: JSON config file
        overrides: e.g. {"seed": 3, "search.constraint_ms": 9.0}; None values are ignored
    """
    data = load_config(path)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = value
    return validate_experiment_config(data)
