import numpy as np
import pytest

from data.load_data import iterate_batches
from utils.nas.latency import LatencyModel, OracleParams, latency_range
from utils.nas.search_space import NUM_OPERATORS
from workflows.reporting import constraint_summary, trace_frame
from workflows.search import (
    LatencyMultiplier,
    _alpha_step,
    ablate_strategies,
    default_constraint,
    init_search_state,
    operator_evaluations,
    run_search,
    search_step,
)


def constant_predictor(num_layers: int, value: float) -> LatencyModel:
    """Predictor with zero weights: always ``value`` ms, zero gradient."""
    model = LatencyModel(num_layers, hidden=(4,), rng=None)
    model.target_mean.data[:] = value
    return model


def first_batch(dataset, seed=0):
    return next(iterate_batches(dataset, 12, np.random.default_rng(seed)))


class TestLatencyMultiplier:
    def test_on_target_is_unchanged(self):
        multiplier = LatencyMultiplier(constraint_ms=4.0, lr=0.0005, value=0.3)
        assert multiplier.update(4.0) == 0.0
        assert multiplier.value == 0.3

    def test_double_latency_adds_the_rate(self):
        multiplier = LatencyMultiplier(constraint_ms=4.0, lr=0.0005)
        multiplier.update(8.0)
        assert multiplier.value == 0.0005

    def test_under_budget_goes_negative(self):
        multiplier = LatencyMultiplier(constraint_ms=4.0, lr=0.1)
        multiplier.update(2.0)
        assert multiplier.value == pytest.approx(-0.05)

    def test_clamp_at_zero(self):
        multiplier = LatencyMultiplier(constraint_ms=4.0, lr=0.1, clamp=True)
        multiplier.update(2.0)
        assert multiplier.value == 0.0

    def test_fixed_mode(self):
        multiplier = LatencyMultiplier(constraint_ms=4.0, lr=0.1, value=0.5, mode="fixed")
        assert multiplier.update(40.0) == 0.0
        assert multiplier.value == 0.5

    def test_reaches_constraint_on_a_convex_toy(self):
        # latency falls smoothly as the penalty weight grows
        def latency(lam):
            return 10.0 / (1.0 + max(lam, 0.0))

        multiplier = LatencyMultiplier(constraint_ms=5.0, lr=0.5)
        for _ in range(500):
            multiplier.update(latency(multiplier.value))
        assert abs(latency(multiplier.value) - 5.0) / 5.0 <= 0.01


class TestSearchStep:
    def test_lambda_unchanged_on_target(self, tiny_config, tiny_split):
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        multiplier = LatencyMultiplier(4.0, tiny_config.search.eta_lambda)
        record = search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                             constant_predictor(2, 4.0), tiny_config.search, multiplier)
        assert record.lam == 0.0
        assert record.lat_pred_ms == 4.0

    def test_lambda_rises_by_rate_at_double_latency(self, tiny_config, tiny_split):
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        multiplier = LatencyMultiplier(4.0, 0.0005)
        record = search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                             constant_predictor(2, 8.0), tiny_config.search, multiplier)
        assert record.lam == 0.0005
        assert state.lam == 0.0005

    def test_alpha_frozen_during_warmup(self, tiny_config, tiny_split):
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        before = state.alpha.copy()
        record = search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                             constant_predictor(2, 4.0), tiny_config.search, LatencyMultiplier(4.0, 0.0005))
        assert not record.alpha_updated
        assert record.valid_loss is None
        assert np.array_equal(state.alpha, before)

    def test_alpha_moves_after_warmup(self, tiny_config, tiny_split):
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        state.epoch = tiny_config.search.alpha_freeze_epochs
        before = state.alpha.copy()
        record = search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                             constant_predictor(2, 4.0), tiny_config.search, LatencyMultiplier(4.0, 0.0005))
        assert record.alpha_updated
        assert np.isfinite(record.valid_loss)
        assert not np.array_equal(state.alpha, before)

    def test_weight_step_touches_sampled_operators(self, tiny_config, tiny_split):
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                    constant_predictor(2, 4.0), tiny_config.search, LatencyMultiplier(4.0, 0.0005))
        # sandwich: top, bottom and one middle path per layer
        assert np.all(state.touched.sum(axis=1) == 3)

    @pytest.mark.parametrize("strategy", ["sandwich", "darts_softmax"])
    def test_alpha_step_leaves_running_statistics_alone(self, tiny_config, tiny_split, strategy):
        search_cfg = tiny_config.search.model_copy(update={"strategy": strategy})
        state = init_search_state(tiny_config, constraint_ms=4.0, seed=0)
        search_step(state, first_batch(tiny_split.train), first_batch(tiny_split.valid),
                    constant_predictor(2, 4.0), search_cfg, LatencyMultiplier(4.0, 0.0005))
        before = state.supernet.bn_statistics()
        before_alpha = state.alpha.copy()
        _alpha_step(state, *first_batch(tiny_split.valid, seed=1), constant_predictor(2, 4.0), search_cfg)
        after = state.supernet.bn_statistics()
        for name, entry in before.items():
            assert np.array_equal(entry["mean"], after[name]["mean"]), name
            assert np.array_equal(entry["var"], after[name]["var"]), name
        assert not np.array_equal(state.alpha, before_alpha)
        assert {bn.mode for _, bn in state.supernet.batch_norms()} == {"train"}


class TestRunSearch:
    @pytest.fixture
    def predictor(self, tiny_config):
        low, high = latency_range(tiny_config.supernet, tiny_config.latency_oracle)
        return constant_predictor(2, 0.5 * (low + high))

    def test_same_seed_same_trace(self, tiny_config, tiny_split, predictor):
        first, _ = run_search(tiny_config, tiny_split, predictor)
        second, _ = run_search(tiny_config, tiny_split, predictor)
        assert [r.to_record() for r in first.trace] == [r.to_record() for r in second.trace]
        assert first.arch == second.arch
        assert first.alpha == second.alpha

    def test_result_shape(self, tiny_config, tiny_split, predictor):
        result, supernet = run_search(tiny_config, tiny_split, predictor)
        assert len(result.arch) == 2
        assert all(0 <= i < NUM_OPERATORS for i in result.arch)
        assert len(result.trace) == 4
        assert [r.alpha_updated for r in result.trace] == [False, False, True, True]
        assert result.reachable
        assert 0.0 < result.coverage <= 1.0
        assert supernet.num_layers == 2

    def test_default_constraint_is_range_midpoint(self, tiny_config, tiny_split, predictor):
        result, _ = run_search(tiny_config, tiny_split, predictor)
        assert result.constraint_ms == pytest.approx(default_constraint(tiny_config.supernet,
                                                                        tiny_config.latency_oracle))
        assert result.to_dict()["lambda"] == result.lam

    def test_unreachable_constraint_warns(self, tiny_config, tiny_split, predictor, app_caplog):
        result, _ = run_search(tiny_config, tiny_split, predictor, constraint_ms=1e-3)
        assert not result.reachable
        assert any("outside the reachable range" in r.getMessage() for r in app_caplog.records)

    @pytest.mark.parametrize("clamp", [False, True])
    def test_lambda_keeps_rising_below_the_reachable_minimum(self, tiny_config, tiny_split, clamp):
        low, _ = latency_range(tiny_config.supernet, tiny_config.latency_oracle)
        # a predictor that always answers the smallest reachable latency
        predictor = constant_predictor(2, low)
        search_cfg = tiny_config.search.model_copy(update={"clamp_lambda": clamp})
        result, _ = run_search(tiny_config, tiny_split, predictor, constraint_ms=0.5 * low, search_cfg=search_cfg)
        lams = np.array([r.lam for r in result.trace])
        assert lams[0] > 0.0
        assert np.all(np.diff(lams[-3:]) > 0)
        assert np.all(np.diff(lams) > 0)
        assert result.lam == lams[-1]

    def test_fixed_lambda(self, tiny_config, tiny_split, predictor):
        search_cfg = tiny_config.search.model_copy(update={"lambda_mode": "fixed", "lambda_init": 0.5})
        result, _ = run_search(tiny_config, tiny_split, predictor, search_cfg=search_cfg)
        assert {r.lam for r in result.trace} == {0.5}

    @pytest.mark.parametrize("strategy", ["gdas_single", "topk_full", "darts_softmax"])
    def test_other_strategies_run(self, tiny_config, tiny_split, predictor, strategy):
        search_cfg = tiny_config.search.model_copy(update={"strategy": strategy})
        result, _ = run_search(tiny_config, tiny_split, predictor, search_cfg=search_cfg)
        assert result.strategy == strategy
        assert len(result.arch) == 2

    def test_softmax_relaxation_trains_every_operator(self, tiny_config, tiny_split, predictor):
        search_cfg = tiny_config.search.model_copy(update={"strategy": "darts_softmax", "epochs": 1})
        result, _ = run_search(tiny_config, tiny_split, predictor, search_cfg=search_cfg)
        assert result.coverage == 1.0


class TestAblation:
    def test_operator_evaluations(self):
        assert operator_evaluations("gdas_single", 22, 12) == 22
        assert operator_evaluations("sandwich", 22, 12) == 66
        assert operator_evaluations("topk_full", 22, 12) == 264

    def test_rows_per_strategy_and_seed(self, tiny_config, tiny_split):
        predictor = constant_predictor(2, 1.0)
        rows, timings = ablate_strategies(tiny_config, tiny_split, predictor, ["gdas_single", "sandwich"],
                                          seeds=[0, 1], epochs=1, max_steps_per_epoch=1)
        assert [(r["strategy"], r["seed"]) for r in rows] == [
            ("gdas_single", 0), ("gdas_single", 1), ("sandwich", 0), ("sandwich", 1)
        ]
        assert set(timings) == {"gdas_single/0", "gdas_single/1", "sandwich/0", "sandwich/1"}
        assert rows[0]["operator_evaluations_per_step"] == 2
        assert rows[2]["operator_evaluations_per_step"] == 6


def test_default_constraint_inside_range(tiny_supernet_cfg):
    params = OracleParams(sigma=0.0)
    low, high = latency_range(tiny_supernet_cfg, params)
    assert low < default_constraint(tiny_supernet_cfg, params) < high


def test_multiplier_moves_with_the_violation(tiny_config, tiny_split):
    low, high = latency_range(tiny_config.supernet, tiny_config.latency_oracle)
    predictor = LatencyModel(2, hidden=(8,), rng=np.random.default_rng(0))
    predictor.target_mean.data[:] = 0.5 * (low + high)
    predictor.target_scale.data[:] = 0.25 * (high - low)
    result, _ = run_search(tiny_config, tiny_split, predictor)
    summary = constraint_summary(trace_frame([r.to_record() for r in result.trace]), result.constraint_ms)
    assert summary["sign_violations"] == 0
