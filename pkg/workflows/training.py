"""
Stand-alone training of searched architectures.

Covers the standard recipe, hybrid transformable training (grafted
activations whose non-linearity is removed over the first ``grafting_epochs``
epochs) and the train-first vs transform-first comparison.
"""

from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from data.load_data import DatasetFile, DatasetSplit, batches_per_epoch, iterate_batches, random_flip
from utils.common.errors import NumericalError
from utils.common.logger import get_logger
from utils.nas import tensor as T
from utils.nas.latency import OracleParams, synthetic_oracle
from utils.nas.layers import BatchNorm2d, ClassifierHead, Conv2d, ConvBNAct, Module, ReLU6, Sequential, clip_gradients
from utils.nas.optim import SGD, cosine_lr
from utils.nas.search_space import Network, SupernetConfig, build_network
from utils.nas.transform import depth_report, transform_network, verify_equivalence
from workflows.models import TrainConfig
from workflows.state import EpochMetrics, TrainResult

logger = get_logger(__name__)

# (model, images, labels, optimizer, lr) -> loss
StepFn = Callable[[Module, np.ndarray, np.ndarray, SGD, float], float]


def epsilon_schedule(e_curr: int, e_total: int) -> float:
    """Linear ramp E_curr / E_total, clamped to 1 from epoch E_total on."""
    if e_curr < e_total:
        return e_curr / e_total
    return 1.0


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits of any model; restores its train/eval mode."""
    was_training = model.training
    model.eval()
    try:
        chunks = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        model.release_caches()
        model.train(was_training)
    return np.concatenate(chunks, axis=0)


def evaluate_accuracy(model: Module, dataset: DatasetFile, batch_size: int = 256) -> float:
    logits = predict_logits(model, dataset.images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def supervised_step(model: Module, images: np.ndarray, labels: np.ndarray, optimizer: SGD, lr: float,
                    grad_clip: float = 0.0) -> float:
    """Cross-entropy forward/backward followed by one SGD step."""
    model.zero_grad()
    logits = model(images)
    loss, dlogits = T.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss", context={"lr": lr})
    model.backward(dlogits)
    if grad_clip > 0:
        clip_gradients(model.parameters(), grad_clip)
    optimizer.step(lr=lr)
    model.zero_grad()
    return loss


def fit_network(
    model: Module,
    split: DatasetSplit,
    cfg: TrainConfig,
    rng: np.random.Generator,
    hybrid: bool = False,
    step_fn: Optional[StepFn] = None,
    max_steps_per_epoch: Optional[int] = None,
    label: str = "train",
) -> TrainResult:
    """
    Shared SGD loop with cosine learning rate and per-epoch validation.

    Args:
        model: Network (or any Module) to train in place
        split: Train/valid data
        cfg: Train section of the experiment config
        rng: Drives batch order and flips
        hybrid: Apply the epsilon schedule to the grafted activations
        step_fn: Replaces the single-resolution supervised step
        max_steps_per_epoch: Truncate epochs (ablations)
        label: Prefix of the log lines

    Returns:
        TrainResult with one EpochMetrics per epoch
    """
    optimizer = SGD(model.named_parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps = batches_per_epoch(split.train.count, cfg.batch_size, max_steps_per_epoch)
    total = steps * cfg.epochs
    iteration = 0
    history = []
    model.train()

    def default_step(m, images, labels, opt, lr):
        return supervised_step(m, images, labels, opt, lr, cfg.grad_clip)

    step = step_fn or default_step
    for epoch in range(cfg.epochs):
        eps = None
        if hybrid:
            eps = epsilon_schedule(epoch, cfg.grafting_epochs)
            model.set_graft(eps)
        losses = []
        lr = cosine_lr(cfg.lr, iteration, total)
        for images, labels in iterate_batches(split.train, cfg.batch_size, rng, max_steps_per_epoch):
            if cfg.random_flip:
                images = random_flip(images, rng)
            lr = cosine_lr(cfg.lr, iteration, total)
            losses.append(step(model, images, labels, optimizer, lr))
            iteration += 1
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_acc=evaluate_accuracy(model, split.valid),
            eps=eps,
            lr=lr,
        )
        history.append(metrics)
        eps_note = f", eps={eps:.3f}" if eps is not None else ""
        logger.info(
            f"[{label}] epoch {epoch + 1}/{cfg.epochs}: loss={metrics.train_loss:.4f}, "
            f"val_acc={metrics.val_acc:.4f}{eps_note}"
        )
    if hybrid:
        model.set_graft(1.0)
    return TrainResult(network=model, history=history, hybrid=hybrid, elastic=step_fn is not None)


def train_standard(model: Module, split: DatasetSplit, cfg: TrainConfig, rng: np.random.Generator,
                   **kwargs) -> TrainResult:
    """SGD-momentum with cosine learning rate; linear operators stay purely linear."""
    return fit_network(model, split, cfg, rng, hybrid=False, **kwargs)


def train_hybrid_transformable(net: Network, split: DatasetSplit, cfg: TrainConfig, rng: np.random.Generator,
                               **kwargs) -> TrainResult:
    """
    Train with grafted activations in the linear operators.

    The blend factor follows epsilon_schedule per epoch, so the network is
    purely linear (and collapsible) from epoch ``grafting_epochs`` on. Falls
    back to train_standard when the architecture has no linear operator.
    """
    if not net.linear_operators():
        logger.warning("Architecture has no linear operators; hybrid training falls back to standard training")
        return train_standard(net, split, cfg, rng, **kwargs)
    return fit_network(net, split, cfg, rng, hybrid=True, **kwargs)


def build_reference_network(input_shape: Sequence[int], num_classes: int, rng: np.random.Generator,
                            widths: Tuple[int, int] = (16, 32)) -> Sequential:
    """Two conv+BN+ReLU6 blocks, pooling and a classifier; the dataset learnability baseline."""
    c_in = input_shape[0]
    blocks = []
    for width in widths:
        blocks.append(ConvBNAct(Conv2d(c_in, width, 3, stride=2, rng=rng), BatchNorm2d(width), ReLU6()))
        c_in = width
    return Sequential(*blocks, ClassifierHead(c_in, num_classes, rng=rng))


def compare_train_first_vs_transform_first(
    supernet_cfg: SupernetConfig,
    arch: Sequence[int],
    split: DatasetSplit,
    cfg: TrainConfig,
    seed: int,
    oracle: Optional[OracleParams] = None,
    tol: float = 1e-3,
    max_steps_per_epoch: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Same architecture and budget, two orders of operations.

    Branch A trains the deep network (hybrid when possible) and transforms it
    afterwards. Branch B transforms a fresh initialisation and trains the
    shallow network directly.
    """
    oracle = (oracle or OracleParams()).noiseless()

    deep = build_network(supernet_cfg, arch, np.random.default_rng([seed, 5]))
    trained = train_hybrid_transformable(deep, split, cfg, np.random.default_rng([seed, 6]),
                                         max_steps_per_epoch=max_steps_per_epoch, label="train-first")
    shallow_a = transform_network(deep)
    equivalence = verify_equivalence(deep, shallow_a, n_samples=100, tol=tol, rng=np.random.default_rng([seed, 7]))

    skeleton = build_network(supernet_cfg, arch, np.random.default_rng([seed, 5]))
    skeleton.eval()
    shallow_b = transform_network(skeleton)
    transformed_first = train_standard(shallow_b, split, cfg, np.random.default_rng([seed, 6]),
                                       max_steps_per_epoch=max_steps_per_epoch, label="transform-first")

    depth_a = depth_report(deep, shallow_a)
    latency_a = synthetic_oracle(shallow_a, oracle)
    latency_b = synthetic_oracle(shallow_b, oracle)
    report = {
        "arch": [int(i) for i in arch],
        "seed": seed,
        "train_first": {
            "curve": trained.curve(),
            "final_val_acc": evaluate_accuracy(shallow_a, split.valid),
            "depth": shallow_a.depth(),
            "oracle_latency_ms": latency_a,
            "equivalence": equivalence,
            "depth_report": depth_a.to_dict(),
        },
        "transform_first": {
            "curve": transformed_first.curve(),
            "final_val_acc": transformed_first.final_val_acc,
            "depth": shallow_b.depth(),
            "oracle_latency_ms": latency_b,
        },
    }
    report["depth_equal"] = shallow_a.depth() == shallow_b.depth()
    report["latency_equal"] = bool(np.isclose(latency_a, latency_b, rtol=0, atol=1e-12))
    logger.info(
        f"Train-first acc {report['train_first']['final_val_acc']:.4f} vs "
        f"transform-first acc {report['transform_first']['final_val_acc']:.4f}"
    )
    return report
