"""
Desk-scale ablation studies.

- strategies: path-sampling strategies under an identical search budget
- elastic: {distillation on/off} x {calibration on/off}, accuracy at r_min
- hybrid: hybrid transformable training against pure-linear training
- lambda: fixed trade-off coefficients against the learnable multiplier
- order: train-first against transform-first
"""

import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data.load_data import DatasetSplit
from utils.common.config import get_runtime_settings
from utils.common.logger import get_logger
from utils.nas.latency import LatencyModel
from utils.nas.search_space import OperatorSpec, build_network, operator_space
from workflows.elastic import ResolutionGrid, calibrate_bn, evaluate_at_resolution, train_elastic
from workflows.models import ExperimentConfig, TrainConfig
from workflows.search import ablate_strategies, run_search
from workflows.training import compare_train_first_vs_transform_first, train_hybrid_transformable, train_standard

logger = get_logger(__name__)


def default_architecture(num_layers: int) -> List[int]:
    """Linear and non-linear K3/E3 operators alternating, starting with linear."""
    specs = operator_space()
    linear = specs.index(OperatorSpec(True, 3, 3))
    non_linear = specs.index(OperatorSpec(False, 3, 3))
    return [linear if i % 2 == 0 else non_linear for i in range(num_layers)]


def _ablation_train_config(cfg: ExperimentConfig) -> TrainConfig:
    epochs = cfg.ablation.train_epochs
    return cfg.train.model_copy(update={"epochs": epochs, "grafting_epochs": max(1, epochs // 3)})


def _fan_out(fn: Callable[[int], Any], seeds: Sequence[int]) -> List[Any]:
    """Run ``fn`` per seed, over a process pool when more than one worker is allowed."""
    workers = min(get_runtime_settings().threads, len(seeds))
    if workers <= 1:
        return [fn(seed) for seed in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def _elastic_seed(seed: int, cfg: ExperimentConfig, split: DatasetSplit, arch: List[int]) -> List[Dict[str, Any]]:
    train_cfg = _ablation_train_config(cfg)
    grid = ResolutionGrid.from_config(cfg.elastic, cfg.supernet)
    rows = []
    for distill in (True, False):
        net = build_network(cfg.supernet, arch, np.random.default_rng([seed, 5]))
        elastic_cfg = cfg.elastic.model_copy(update={"distill": distill})
        train_elastic(net, split, train_cfg, elastic_cfg, np.random.default_rng([seed, 6]),
                      hybrid=cfg.train.hybrid, max_steps_per_epoch=cfg.ablation.max_steps_per_epoch,
                      label=f"elastic distill={distill} seed={seed}")
        stats = calibrate_bn(net, split.train, grid, cfg.elastic.n_calib, cfg.elastic.calib_batch)
        for calibrate in (True, False):
            rows.append({
                "seed": seed,
                "distill": distill,
                "calibrate": calibrate,
                "resolution": grid.r_min,
                "accuracy": evaluate_at_resolution(net, split.valid, grid.r_min, stats if calibrate else None),
            })
    return rows


def _hybrid_seed(seed: int, cfg: ExperimentConfig, split: DatasetSplit, arch: List[int]) -> List[Dict[str, Any]]:
    train_cfg = _ablation_train_config(cfg)
    rows = []
    for hybrid in (True, False):
        net = build_network(cfg.supernet, arch, np.random.default_rng([seed, 5]))
        trainer = train_hybrid_transformable if hybrid else train_standard
        result = trainer(net, split, train_cfg, np.random.default_rng([seed, 6]),
                         max_steps_per_epoch=cfg.ablation.max_steps_per_epoch,
                         label=f"hybrid={hybrid} seed={seed}")
        rows.append({"seed": seed, "hybrid": hybrid, "final_val_acc": result.final_val_acc})
    return rows


def elastic_study(cfg: ExperimentConfig, split: DatasetSplit, arch: List[int]) -> Dict[str, Any]:
    rows = [row for seed_rows in _fan_out(partial(_elastic_seed, cfg=cfg, split=split, arch=arch),
                                          cfg.ablation.seeds) for row in seed_rows]
    frame = pd.DataFrame(rows)
    medians = frame.groupby(["distill", "calibrate"])["accuracy"].median()
    summary = {f"distill={d},calibrate={c}": float(v) for (d, c), v in medians.items()}
    wide = frame.pivot_table(index="seed", columns=["distill", "calibrate"], values="accuracy")
    summary["seeds_calibration_helps"] = int((wide[(True, True)] >= wide[(True, False)]).sum())
    summary["seeds_distillation_helps"] = int((wide[(True, True)] >= wide[(False, True)]).sum())
    return {"rows": rows, "summary": summary}


def hybrid_study(cfg: ExperimentConfig, split: DatasetSplit, arch: List[int]) -> Dict[str, Any]:
    rows = [row for seed_rows in _fan_out(partial(_hybrid_seed, cfg=cfg, split=split, arch=arch),
                                          cfg.ablation.seeds) for row in seed_rows]
    wide = pd.DataFrame(rows).pivot_table(index="seed", columns="hybrid", values="final_val_acc")
    summary = {
        "mean_acc_hybrid": float(wide[True].mean()),
        "mean_acc_linear": float(wide[False].mean()),
        "seeds_hybrid_ge_linear": int((wide[True] >= wide[False]).sum()),
    }
    return {"rows": rows, "summary": summary}


def lambda_study(cfg: ExperimentConfig, split: DatasetSplit, predictor: LatencyModel) -> Dict[str, Any]:
    """Final oracle latency of fixed-lambda searches against the learnable multiplier, first seed only."""
    seed = cfg.ablation.seeds[0]
    base = cfg.search.model_copy(update={
        "epochs": cfg.ablation.search_epochs,
        "max_steps_per_epoch": cfg.ablation.max_steps_per_epoch,
        "alpha_freeze_epochs": min(cfg.search.alpha_freeze_epochs, cfg.ablation.search_epochs - 1),
    })
    settings = [("learnable", cfg.search.lambda_init)] + [("fixed", lam) for lam in cfg.ablation.fixed_lambdas]
    rows = []
    for mode, lam in settings:
        search_cfg = base.model_copy(update={"lambda_mode": mode, "lambda_init": lam})
        result, _ = run_search(cfg, split, predictor, seed=seed, search_cfg=search_cfg)
        rows.append({
            "lambda_mode": mode,
            "lambda_init": lam,
            "final_lambda": result.lam,
            "constraint_ms": result.constraint_ms,
            "oracle_latency_ms": result.oracle_latency_ms,
            "latency_error": result.latency_error,
            "arch": result.arch,
        })
    best = min(rows, key=lambda r: r["latency_error"])
    return {"rows": rows, "summary": {"closest_to_constraint": f"{best['lambda_mode']}:{best['lambda_init']}"}}


def order_study(cfg: ExperimentConfig, split: DatasetSplit, arch: List[int]) -> Dict[str, Any]:
    """Train-first vs transform-first on the same architecture and budget, first seed only."""
    seed = cfg.ablation.seeds[0]
    report = compare_train_first_vs_transform_first(
        cfg.supernet, arch, split, _ablation_train_config(cfg), seed, oracle=cfg.latency_oracle,
        tol=cfg.verify.tol, max_steps_per_epoch=cfg.ablation.max_steps_per_epoch,
    )
    summary = {
        "train_first_acc": report["train_first"]["final_val_acc"],
        "transform_first_acc": report["transform_first"]["final_val_acc"],
        "depth_equal": report["depth_equal"],
        "latency_equal": report["latency_equal"],
    }
    return {"rows": [report], "summary": summary}


def strategy_study(cfg: ExperimentConfig, split: DatasetSplit, predictor: LatencyModel) -> Tuple[Dict[str, Any], Dict[str, float]]:
    rows, timings = ablate_strategies(cfg, split, predictor, cfg.ablation.strategies, cfg.ablation.seeds,
                                      cfg.ablation.search_epochs, cfg.ablation.max_steps_per_epoch)
    numeric = ["coverage", "coverage_first_epoch", "operator_evaluations_per_step", "peak_live_operators",
               "latency_error"]
    means = pd.DataFrame(rows).groupby("strategy", sort=False)[numeric].mean()
    summary = {strategy: {k: float(v) for k, v in values.items()} for strategy, values in means.iterrows()}
    return {"rows": rows, "summary": summary}, timings


def run_ablation(
    cfg: ExperimentConfig,
    split: DatasetSplit,
    predictor: Optional[LatencyModel],
    arch: Optional[Sequence[int]] = None,
    studies: Optional[Sequence[str]] = None,
) -> Tuple[Dict[str, Any], Dict[str, float]]:
    """
    Run the configured studies.

    Returns:
        (results keyed by study name, wall-clock seconds per study and run)
    """
    arch = list(arch) if arch is not None else default_architecture(cfg.supernet.num_layers)
    results, timings = {}, {}
    for study in studies or cfg.ablation.studies:
        logger.info(f"Ablation study '{study}' over seeds {cfg.ablation.seeds}")
        start = time.perf_counter()
        if study == "strategies":
            results[study], per_run = strategy_study(cfg, split, predictor)
            timings.update({f"strategies/{k}": v for k, v in per_run.items()})
        elif study == "elastic":
            results[study] = elastic_study(cfg, split, arch)
        elif study == "hybrid":
            results[study] = hybrid_study(cfg, split, arch)
        elif study == "lambda":
            results[study] = lambda_study(cfg, split, predictor)
        elif study == "order":
            results[study] = order_study(cfg, split, arch)
        timings[study] = time.perf_counter() - start
    return results, timings
