"""
Hardware-aware bi-level search.

Each iteration updates the supernet weights on a training batch, the
architecture parameters on a validation batch (after the freeze period) and
the latency multiplier by gradient ascent on LAT/T - 1.
"""

import time
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from data.load_data import DatasetFile, DatasetSplit, batches_per_epoch, iterate_batches
from utils.common.errors import NumericalError
from utils.common.logger import get_logger
from utils.nas import sampler as S
from utils.nas import tensor as T
from utils.nas.latency import LatencyModel, OracleParams, latency_range, measure_architecture, predict, predict_with_grad
from utils.nas.layers import ACTIVATIONS, clip_gradients
from utils.nas.optim import SGD, Adam, cosine_lr
from utils.nas.search_space import NUM_OPERATORS, Supernet, SupernetConfig, build_supernet, encode_onehot, onehot_to_indices
from workflows.models import ExperimentConfig, SearchConfig
from workflows.state import SearchResult, SearchState, TraceRecord

logger = get_logger(__name__)


@dataclass
class LatencyMultiplier:
    """
    Multiplier of the latency penalty, updated by gradient ascent:
    lambda <- lambda + lr * (LAT / T - 1).
    """

    constraint_ms: float
    lr: float
    value: float = 0.0
    mode: str = "learnable"
    clamp: bool = False

    def violation(self, latency_ms: float) -> float:
        return latency_ms / self.constraint_ms - 1.0

    def update(self, latency_ms: float) -> float:
        """Apply one ascent step; returns the increment."""
        if self.mode == "fixed":
            return 0.0
        before = self.value
        self.value = self.value + self.lr * self.violation(latency_ms)
        if self.clamp:
            self.value = max(self.value, 0.0)
        return self.value - before


def _check_loss(loss: float, what: str, state: SearchState) -> None:
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite {what} at iteration {state.iteration}",
            context={
                "iteration": state.iteration,
                "epoch": state.epoch,
                "lambda": state.lam,
                "alpha": state.alpha.tolist(),
            },
        )


def _weight_step(state: SearchState, images: np.ndarray, labels: np.ndarray, cfg: SearchConfig,
                 lr: float) -> Tuple[float, S.TopKOrder]:
    supernet = state.supernet
    supernet.zero_grad()
    order = None
    if cfg.strategy == "darts_softmax":
        weights = T.softmax(state.alpha, axis=1)
        logits = supernet.forward_mixed(images, weights)
        total, dlogits = T.softmax_cross_entropy(logits, labels)
        supernet.backward(dlogits)
        state.touched += 1
    else:
        order = S.gumbel_topk_order(state.alpha, cfg.tau, state.rng)
        total = 0.0
        rows = np.arange(supernet.num_layers)
        for path in S.paths_for_strategy(cfg.strategy, order, state.rng):
            logits = supernet.forward_path(images, path.indices)
            loss, dlogits = T.softmax_cross_entropy(logits, labels)
            supernet.backward(dlogits)
            state.touched[rows, path.indices] += 1
            total += loss
    _check_loss(total, "training loss", state)
    if cfg.grad_clip > 0:
        clip_gradients(supernet.parameters(), cfg.grad_clip)
    state.weight_optimizer.step(lr=lr)
    supernet.zero_grad()
    return total, order


def _alpha_step(state: SearchState, images: np.ndarray, labels: np.ndarray, predictor: LatencyModel,
                cfg: SearchConfig) -> Tuple[float, np.ndarray]:
    """Descend L_valid + lambda * (LAT / T - 1); returns the valid loss and the noise used."""
    supernet = state.supernet
    alpha = supernet.arch.alpha
    scale = state.lam / state.constraint_ms
    # batch statistics without moving the running buffers
    supernet.set_bn_mode("batch")
    try:
        if cfg.strategy == "darts_softmax":
            weights = T.softmax(state.alpha, axis=1)
            logits = supernet.forward_mixed(images, weights)
            loss, dlogits = T.softmax_cross_entropy(logits, labels)
            supernet.backward(dlogits)
            _, lat_grad = predict_with_grad(predictor, weights)
            grad = S.softmax_alpha_grad(state.alpha, supernet.mixture_grads + scale * lat_grad)
            noise = None
        else:
            order = S.gumbel_topk_order(state.alpha, cfg.tau, state.rng)
            path = order.path(0)
            logits = supernet.forward_path(images, path.indices, path.gates())
            loss, dlogits = T.softmax_cross_entropy(logits, labels)
            supernet.backward(dlogits)
            hard_grad = np.zeros(state.alpha.shape)
            hard_grad[np.arange(supernet.num_layers), path.indices] = supernet.gate_grads
            _, lat_grad = predict_with_grad(predictor, path.hard)
            grad = S.straight_through_alpha_grad(order, path, hard_grad + scale * lat_grad)
            noise = order.noise
    finally:
        supernet.set_bn_mode("train" if supernet.training else "infer")
    _check_loss(loss, "validation loss", state)
    supernet.zero_grad()
    alpha.grad = grad.astype(alpha.dtype)
    state.alpha_optimizer.step()
    alpha.zero_grad()
    return loss, noise


def current_latency(state: SearchState, predictor: LatencyModel, cfg: SearchConfig,
                    noise: Optional[np.ndarray]) -> float:
    """Predicted latency of the most important path under a given perturbation."""
    if cfg.strategy == "darts_softmax":
        return float(predict(predictor, T.softmax(state.alpha, axis=1))[0])
    if noise is None:
        return float(predict(predictor, encode_onehot(state.alpha))[0])
    order = S.TopKOrder(state.alpha, noise, cfg.tau)
    return float(predict(predictor, order.path(0).hard)[0])


def search_step(
    state: SearchState,
    train_batch: Tuple[np.ndarray, np.ndarray],
    valid_batch: Tuple[np.ndarray, np.ndarray],
    predictor: LatencyModel,
    cfg: SearchConfig,
    multiplier: LatencyMultiplier,
    lr_w: Optional[float] = None,
) -> TraceRecord:
    """
    One bi-level iteration.

    1. weights descend the summed loss of the sampled paths on ``train_batch``
    2. alpha (unless frozen) descends L_valid + lambda * (LAT/T - 1) on ``valid_batch``
    3. lambda ascends by eta_lambda * (LAT/T - 1), LAT taken after the alpha update
       under the same Gumbel perturbation

    Raises:
        NumericalError: On a non-finite loss or gradient
    """
    train_loss, order = _weight_step(state, *train_batch, cfg, cfg.eta_w if lr_w is None else lr_w)
    alpha_updated = state.epoch >= cfg.alpha_freeze_epochs
    valid_loss = None
    noise = order.noise if order is not None else None
    if alpha_updated:
        valid_loss, noise = _alpha_step(state, *valid_batch, predictor, cfg)
    latency = current_latency(state, predictor, cfg, noise)
    multiplier.update(latency)
    state.lam = multiplier.value
    if not np.isfinite(state.lam):
        raise NumericalError("latency multiplier diverged", context={"iteration": state.iteration})
    record = TraceRecord(
        iter=state.iteration,
        epoch=state.epoch,
        lam=float(state.lam),
        lat_pred_ms=latency,
        valid_loss=None if valid_loss is None else float(valid_loss),
        train_loss=float(train_loss),
        alpha_updated=alpha_updated,
    )
    state.trace.append(record)
    state.iteration += 1
    return record


def default_constraint(supernet_cfg: SupernetConfig, oracle: OracleParams) -> float:
    """Midpoint of the reachable latency range."""
    low, high = latency_range(supernet_cfg, oracle)
    return 0.5 * (low + high)


def _cycle(dataset: DatasetFile, batch_size: int, rng: np.random.Generator) -> Iterator:
    while True:
        yielded = False
        for batch in iterate_batches(dataset, batch_size, rng):
            yielded = True
            yield batch
        if not yielded:
            return


def init_search_state(cfg: ExperimentConfig, constraint_ms: float, seed: int) -> SearchState:
    search = cfg.search
    supernet = build_supernet(cfg.supernet, np.random.default_rng([seed, 2]))
    return SearchState(
        supernet=supernet,
        constraint_ms=constraint_ms,
        rng=np.random.default_rng([seed, 3]),
        weight_optimizer=SGD(supernet.named_parameters(), lr=search.eta_w, momentum=search.momentum,
                             weight_decay=search.weight_decay),
        alpha_optimizer=Adam([("alpha", supernet.arch.alpha)], lr=search.eta_alpha,
                             weight_decay=search.alpha_weight_decay),
        lam=search.lambda_init,
    )


def run_search(
    cfg: ExperimentConfig,
    split: DatasetSplit,
    predictor: LatencyModel,
    seed: Optional[int] = None,
    constraint_ms: Optional[float] = None,
    search_cfg: Optional[SearchConfig] = None,
) -> Tuple[SearchResult, Supernet]:
    """
    Run the full search and discretise the result.

    Args:
        cfg: Experiment config
        split: Train (weights) / valid (alpha) data
        predictor: Trained latency predictor
        seed: Overrides cfg.seed
        constraint_ms: Overrides cfg.search.constraint_ms
        search_cfg: Replaces cfg.search (ablations)

    Returns:
        SearchResult and the trained supernet
    """
    search = search_cfg or cfg.search
    seed = cfg.seed if seed is None else seed
    low, high = latency_range(cfg.supernet, cfg.latency_oracle)
    target = constraint_ms or search.constraint_ms or 0.5 * (low + high)
    reachable = low <= target <= high
    if not reachable:
        logger.warning(
            f"Latency constraint {target:.3f} ms is outside the reachable range [{low:.3f}, {high:.3f}] ms; "
            "returning a best-effort architecture"
        )

    state = init_search_state(cfg, target, seed)
    multiplier = LatencyMultiplier(target, search.eta_lambda, search.lambda_init, search.lambda_mode,
                                   search.clamp_lambda)
    steps = batches_per_epoch(split.train.count, search.batch_size, search.max_steps_per_epoch)
    total_steps = steps * search.epochs
    valid_batches = _cycle(split.valid, search.batch_size, np.random.default_rng([seed, 4]))
    coverage_first_epoch = None
    ACTIVATIONS.reset()
    state.supernet.train()
    logger.info(
        f"Search: strategy={search.strategy}, T={target:.3f} ms, {search.epochs} epochs x {steps} steps, "
        f"alpha frozen for {search.alpha_freeze_epochs} epochs"
    )

    for epoch in range(search.epochs):
        state.epoch = epoch
        for train_batch in iterate_batches(split.train, search.batch_size, state.rng, search.max_steps_per_epoch):
            lr = cosine_lr(search.eta_w, state.iteration, total_steps)
            search_step(state, train_batch, next(valid_batches), predictor, search, multiplier, lr_w=lr)
        if epoch == 0:
            coverage_first_epoch = S.coverage(state.touched)
        last = state.trace[-1] if state.trace else None
        if last is not None:
            logger.info(
                f"Search epoch {epoch + 1}/{search.epochs}: lambda={last.lam:.5f}, "
                f"LAT_pred={last.lat_pred_ms:.3f} ms, coverage={S.coverage(state.touched):.2%}"
            )

    onehot = encode_onehot(state.alpha)
    arch = onehot_to_indices(onehot)
    result = SearchResult(
        arch=arch,
        lam=float(state.lam),
        constraint_ms=float(target),
        predicted_latency_ms=float(predict(predictor, onehot)[0]),
        oracle_latency_ms=measure_architecture(cfg.supernet, arch, cfg.latency_oracle.noiseless()),
        latency_range_ms=[low, high],
        reachable=reachable,
        strategy=search.strategy,
        coverage=S.coverage(state.touched),
        coverage_first_epoch=coverage_first_epoch,
        peak_live_operators=ACTIVATIONS.peak,
        alpha=state.alpha.tolist(),
        trace=state.trace,
    )
    logger.info(
        f"Search finished: arch={arch}, oracle latency {result.oracle_latency_ms:.3f} ms "
        f"(T={target:.3f}, error {result.latency_error:.2%})"
    )
    return result, state.supernet


def ablate_strategies(
    cfg: ExperimentConfig,
    split: DatasetSplit,
    predictor: LatencyModel,
    strategies: Sequence[str],
    seeds: Sequence[int],
    epochs: int,
    max_steps_per_epoch: Optional[int] = None,
) -> Tuple[List[Dict[str, Any]], Dict[str, float]]:
    """
    Identical search budgets per strategy and seed.

    Returns:
        (rows with coverage, operator evaluations, peak live-operator proxy and
        latency error; wall-clock seconds keyed by "strategy/seed")
    """
    rows, timings = [], {}
    num_layers = cfg.supernet.num_layers
    for strategy in strategies:
        search_cfg = cfg.search.model_copy(update={
            "strategy": strategy,
            "epochs": epochs,
            "max_steps_per_epoch": max_steps_per_epoch,
            "alpha_freeze_epochs": min(cfg.search.alpha_freeze_epochs, max(epochs - 1, 0)),
        })
        for seed in seeds:
            start = time.perf_counter()
            result, _ = run_search(cfg, split, predictor, seed=seed, search_cfg=search_cfg)
            timings[f"{strategy}/{seed}"] = time.perf_counter() - start
            rows.append({
                "strategy": strategy,
                "seed": seed,
                "coverage": result.coverage,
                "coverage_first_epoch": result.coverage_first_epoch,
                "operator_evaluations_per_step": operator_evaluations(strategy, num_layers, NUM_OPERATORS),
                "peak_live_operators": result.peak_live_operators,
                "latency_error": result.latency_error,
                "lambda": result.lam,
                "arch": result.arch,
            })
    return rows, timings


def operator_evaluations(strategy: str, num_layers: int, num_operators: int) -> int:
    """Operator forward passes per weight step."""
    paths = {"gdas_single": 1, "sandwich": 3, "topk_full": num_operators, "darts_softmax": num_operators}
    return paths[strategy] * num_layers
