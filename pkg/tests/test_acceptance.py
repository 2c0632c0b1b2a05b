"""
Desk-scale acceptance runs. Deselected by default; run with ``pytest -m slow``.
"""

import itertools

import numpy as np
import pytest

from data.generate_synthetic_data import synth_dataset
from data.load_data import split_dataset
from utils.nas.latency import (
    LatencyModel,
    OracleParams,
    architecture_latency,
    fit_predictor,
    generate_pairs,
)
from utils.nas.search_space import NUM_OPERATORS, MBConvOperator, OperatorSpec, SupernetConfig, build_network
from utils.nas.transform import collapse_mbconv, transform_network, verify_equivalence
from workflows.ablation import run_ablation
from workflows.models import ExperimentConfig
from workflows.reporting import constraint_summary, trace_frame
from workflows.search import run_search

pytestmark = pytest.mark.slow

DESK = SupernetConfig()


@pytest.fixture(scope="module")
def desk_config():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def desk_split(desk_config):
    ds = desk_config.dataset
    dataset = synth_dataset(seed=desk_config.seed, classes=ds.classes, count=ds.count, channels=ds.channels,
                            height=ds.height, width=ds.width, noise=ds.noise)
    return split_dataset(dataset, ds.valid_fraction, seed=desk_config.seed)


@pytest.fixture(scope="module")
def desk_predictor(desk_config):
    pcfg = desk_config.latency_predictor
    pairs = generate_pairs(desk_config.supernet, pcfg.n_pairs, desk_config.latency_oracle, desk_config.seed)
    model, _ = fit_predictor(pairs, desk_config.supernet.num_layers, NUM_OPERATORS,
                             train_fraction=pcfg.train_fraction, epochs=pcfg.epochs, batch_size=pcfg.batch_size,
                             lr=pcfg.lr, hidden=pcfg.hidden, rng=np.random.default_rng(8))
    return model


def _randomise_bn(module, rng):
    for _, bn in module.batch_norms():
        c = bn.gamma.shape[0]
        dtype = bn.gamma.dtype
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(dtype)
        bn.beta.data = rng.normal(scale=0.1, size=c).astype(dtype)
        bn.running_mean.data = rng.normal(scale=0.1, size=c).astype(dtype)
        bn.running_var.data = rng.uniform(0.5, 2.0, c).astype(dtype)
    return module


def _operator_cases():
    shapes = [(4, 4, 1), (4, 8, 1), (4, 8, 2), (6, 6, 2)]
    return list(itertools.product(shapes, (3, 5, 7), (3, 6)))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
def test_random_linear_operators_collapse_exactly(dtype, tol):
    rng = np.random.default_rng(2024)
    cases = _operator_cases()
    worst = 0.0
    for i in range(100):
        (c_in, c_out, stride), kernel, expansion = cases[i % len(cases)]
        op = MBConvOperator(c_in, c_out, stride, OperatorSpec(True, kernel, expansion), rng=rng, dtype=dtype)
        _randomise_bn(op, rng).eval()
        x = rng.normal(size=(100, c_in, 8, 8)).astype(dtype)
        expected = op(x)
        op.release_caches()
        worst = max(worst, float(np.max(np.abs(collapse_mbconv(op)(x) - expected))))
    assert worst <= tol


def test_desk_network_logits_survive_the_transform():
    rng = np.random.default_rng(7)
    arch = [6, 0, 9, 11, 3, 7]
    deep = _randomise_bn(build_network(DESK, arch, rng), rng).eval()
    report = verify_equivalence(deep, transform_network(deep), n_samples=10_000, tol=1e-3, rng=rng)
    assert report["max_abs"] <= 1e-3
    assert report["argmax_agreement"] >= 0.999


def test_predictor_on_a_thousand_pairs():
    pairs = generate_pairs(DESK, 1000, OracleParams(sigma=0.0), seed=0)
    _, report = fit_predictor(pairs, DESK.num_layers, rng=np.random.default_rng(0))
    assert report.rmse_fraction <= 0.02
    assert report.spearman >= 0.95


def test_sandwich_covers_every_operator_in_the_first_epoch(desk_config, desk_split):
    predictor = LatencyModel(desk_config.supernet.num_layers, hidden=(8,), rng=None)
    coverage = {}
    for strategy in ("sandwich", "gdas_single"):
        search_cfg = desk_config.search.model_copy(update={"strategy": strategy, "epochs": 1})
        result, _ = run_search(desk_config, desk_split, predictor, seed=0, search_cfg=search_cfg)
        coverage[strategy] = result.coverage_first_epoch
    assert coverage["sandwich"] == 1.0
    assert coverage["sandwich"] >= coverage["gdas_single"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_searched_latency_lands_near_the_constraint(desk_config, desk_split, desk_predictor, seed):
    result, _ = run_search(desk_config, desk_split, desk_predictor, seed=seed)
    target = result.constraint_ms
    measured = architecture_latency(desk_config.supernet, desk_config.latency_oracle.noiseless(), result.arch)
    assert abs(measured - target) / target <= 0.05
    summary = constraint_summary(trace_frame([r.to_record() for r in result.trace]), target)
    assert summary["sign_violations"] == 0


def test_calibration_and_distillation_help_the_smallest_resolution(desk_config, desk_split):
    results, _ = run_ablation(desk_config, desk_split, predictor=None, studies=["elastic"])
    summary = results["elastic"]["summary"]
    assert summary["seeds_calibration_helps"] >= 2
    assert summary["seeds_distillation_helps"] >= 2


def test_hybrid_training_is_not_worse_than_pure_linear(desk_config, desk_split):
    results, _ = run_ablation(desk_config, desk_split, predictor=None, studies=["hybrid"])
    assert results["hybrid"]["summary"]["seeds_hybrid_ge_linear"] >= 2
