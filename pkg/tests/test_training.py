import numpy as np
import pytest

from utils.nas.search_space import build_network
from workflows.training import (
    build_reference_network,
    compare_train_first_vs_transform_first,
    epsilon_schedule,
    evaluate_accuracy,
    train_hybrid_transformable,
    train_standard,
)


@pytest.mark.parametrize("e_curr,e_total,expected", [(0, 120, 0.0), (60, 120, 0.5), (120, 120, 1.0),
                                                     (500, 120, 1.0), (0, 0, 1.0)])
def test_epsilon_schedule(e_curr, e_total, expected):
    assert epsilon_schedule(e_curr, e_total) == expected


def test_epsilon_schedule_is_monotone():
    values = [epsilon_schedule(e, 10) for e in range(15)]
    assert values == sorted(values)


class TestTrainStandard:
    def test_zero_learning_rate_keeps_parameters(self, tiny_config, tiny_supernet_cfg, tiny_split):
        net = build_network(tiny_supernet_cfg, [6, 2], np.random.default_rng(0))
        before = {name: p.data.copy() for name, p in net.named_parameters()}
        cfg = tiny_config.train.model_copy(update={"lr": 0.0})
        train_standard(net, tiny_split, cfg, np.random.default_rng(1), max_steps_per_epoch=1)
        for name, p in net.named_parameters():
            assert np.array_equal(p.data, before[name]), name

    def test_same_seed_same_history(self, tiny_config, tiny_supernet_cfg, tiny_split):
        histories = []
        for _ in range(2):
            net = build_network(tiny_supernet_cfg, [6, 2], np.random.default_rng(0))
            result = train_standard(net, tiny_split, tiny_config.train, np.random.default_rng(1))
            histories.append([m.to_record() for m in result.history])
        assert histories[0] == histories[1]

    def test_history_per_epoch(self, tiny_config, tiny_supernet_cfg, tiny_split):
        net = build_network(tiny_supernet_cfg, [6, 2], np.random.default_rng(0))
        result = train_standard(net, tiny_split, tiny_config.train, np.random.default_rng(1))
        assert [m.epoch for m in result.history] == [0, 1]
        assert all(m.eps is None for m in result.history)
        assert all(np.isfinite(m.train_loss) for m in result.history)
        assert 0.0 <= result.final_val_acc <= 1.0
        assert not result.hybrid and not result.elastic

    @pytest.mark.slow
    def test_reference_network_learns_the_data(self, tiny_config, tiny_split):
        model = build_reference_network((3, 16, 16), 3, np.random.default_rng(0))
        cfg = tiny_config.train.model_copy(update={"epochs": 30, "lr": 0.05})
        train_standard(model, tiny_split, cfg, np.random.default_rng(0))
        assert evaluate_accuracy(model, tiny_split.valid) > 2 / 3


class TestHybridTraining:
    def test_grafting_removes_the_non_linearity(self, tiny_config, tiny_supernet_cfg, tiny_split):
        net = build_network(tiny_supernet_cfg, [6, 7], np.random.default_rng(0))
        result = train_hybrid_transformable(net, tiny_split, tiny_config.train, np.random.default_rng(1))
        assert result.hybrid
        assert [m.eps for m in result.history] == [0.0, 1.0]
        for op in net.linear_operators():
            assert op.act1.is_identity and op.act2.is_identity

    def test_no_linear_operator_falls_back(self, tiny_config, tiny_supernet_cfg, tiny_split, app_caplog):
        net = build_network(tiny_supernet_cfg, [0, 1], np.random.default_rng(0))
        result = train_hybrid_transformable(net, tiny_split, tiny_config.train, np.random.default_rng(1),
                                            max_steps_per_epoch=1)
        assert not result.hybrid
        assert any("falls back" in r.getMessage() for r in app_caplog.records)


def test_train_first_vs_transform_first(tiny_config, tiny_supernet_cfg, tiny_split):
    report = compare_train_first_vs_transform_first(tiny_supernet_cfg, [6, 7], tiny_split, tiny_config.train,
                                                    seed=0, max_steps_per_epoch=1)
    assert report["depth_equal"]
    assert report["latency_equal"]
    assert report["train_first"]["depth"] == 4
    assert report["train_first"]["equivalence"]["passed"]
    assert len(report["train_first"]["curve"]) == len(report["transform_first"]["curve"]) == 2


def test_fully_grafted_forward_equals_linear_forward(tiny_supernet_cfg, tiny_dataset):
    linear = build_network(tiny_supernet_cfg, [6, 7], np.random.default_rng(0)).eval()
    grafted = linear.clone()
    grafted.set_graft(0.25)
    grafted.set_graft(epsilon_schedule(5, 5))
    images = tiny_dataset.images[:8]
    assert np.array_equal(grafted.predict(images), linear.predict(images))
