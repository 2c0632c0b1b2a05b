import numpy as np
import pytest

from utils.common.errors import NumericalError
from utils.nas.layers import clip_gradients
from utils.nas.optim import SGD, Adam, cosine_lr
from utils.nas.tensor import Tensor


def _param(values, grad=None, name="w"):
    p = Tensor(np.asarray(values, dtype=np.float64), name=name)
    if grad is not None:
        p.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestSGD:
    def test_plain_step(self):
        p = _param([1.0, 2.0], grad=[0.5, -1.0])
        SGD([p], lr=0.1, momentum=0.0).step()
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_momentum_accumulates(self):
        p = _param([0.0], grad=[1.0])
        opt = SGD([p], lr=0.1, momentum=0.9)
        opt.step()
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1 - 0.19])

    def test_weight_decay_pulls_towards_zero(self):
        p = _param([2.0], grad=[0.0])
        SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step()
        np.testing.assert_allclose(p.data, [1.9])

    def test_zero_learning_rate_leaves_weights(self, rng):
        p = _param(rng.normal(size=5), grad=rng.normal(size=5))
        before = p.data.copy()
        SGD([p], lr=0.1, momentum=0.9, weight_decay=1e-3).step(lr=0.0)
        assert np.array_equal(p.data, before)

    def test_skips_parameters_without_gradient(self):
        p = _param([3.0])
        SGD([p], lr=1.0).step()
        assert p.data[0] == 3.0

    def test_rejects_non_finite_gradient(self):
        p = _param([1.0, 1.0], grad=[np.nan, 0.0])
        with pytest.raises(NumericalError) as info:
            SGD([p], lr=0.1).step()
        assert info.value.context["parameter"] == "w"
        assert np.array_equal(p.data, [1.0, 1.0])

    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            SGD([_param([1.0], name="a"), _param([2.0], name="a")], lr=0.1)

    def test_state_round_trip(self):
        p = _param([0.0], grad=[1.0])
        opt = SGD([("p", p)], lr=0.1, momentum=0.9)
        opt.step()
        restored = SGD([("p", _param([0.0]))], lr=0.1, momentum=0.9)
        restored.load_state_dict(opt.state_dict())
        np.testing.assert_allclose(restored.velocity[0], opt.velocity[0])


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = _param([1.0, 1.0], grad=[3.0, -0.01])
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-6)

    def test_converges_on_quadratic(self):
        p = _param([5.0, -3.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            p.grad = 2.0 * p.data
            opt.step()
        assert np.max(np.abs(p.data)) < 1e-2

    def test_counts_steps(self):
        p = _param([1.0], grad=[1.0])
        opt = Adam([p])
        opt.step()
        opt.step()
        assert opt.step_count == 2

    def test_rejects_infinite_gradient(self):
        p = _param([1.0], grad=[np.inf])
        with pytest.raises(NumericalError):
            Adam([p]).step()

    def test_state_round_trip_is_exact(self, rng):
        def quadratic_grad(p):
            p.grad = 2.0 * p.data - 1.0

        p = _param(rng.normal(size=4), name="p")
        idle = _param([7.0], name="idle")
        opt = Adam([p, idle], lr=0.05, weight_decay=1e-3)
        for _ in range(3):
            quadratic_grad(p)
            opt.step()

        q = _param(p.data.copy(), name="p")
        restored = Adam([q, _param([7.0], name="idle")], lr=0.05, weight_decay=1e-3)
        restored.load_state_dict(opt.state_dict(), step=opt.step_count)
        assert restored.step_count == 3
        state = restored.state_dict()
        assert set(state) == {"adam.m.p", "adam.v.p"}
        for key, value in opt.state_dict().items():
            assert np.array_equal(state[key], value)
        assert restored.state["m"][1] is None

        for _ in range(4):
            quadratic_grad(p)
            quadratic_grad(q)
            opt.step()
            restored.step()
        assert np.array_equal(q.data, p.data)
        assert restored.step_count == opt.step_count == 7

    def test_restored_state_is_a_copy(self):
        p = _param([1.0], grad=[1.0], name="p")
        opt = Adam([p])
        opt.step()
        saved = opt.state_dict()
        restored = Adam([_param([1.0], name="p")])
        restored.load_state_dict(saved, step=1)
        saved["adam.m.p"][0] = 99.0
        assert restored.state["m"][0][0] != 99.0


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
        assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
        assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(0.1, 5, 0) == 0.1

    def test_clip_gradients(self):
        p = _param([0.0, 0.0], grad=[3.0, 4.0])
        norm = clip_gradients([p], 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8], atol=1e-9)

    def test_clip_leaves_small_gradients(self):
        p = _param([0.0], grad=[0.5])
        clip_gradients([p], 1.0)
        assert p.grad[0] == 0.5
