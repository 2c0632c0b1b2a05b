import numpy as np
import pytest
from pydantic import ValidationError

from utils.common.errors import ArchitectureError, ShapeMismatchError
from utils.nas.search_space import (
    NUM_OPERATORS,
    LayerSpec,
    MBConvOperator,
    OperatorSpec,
    SupernetConfig,
    build_network,
    build_supernet,
    decode_architecture,
    encode_onehot,
    indices_to_onehot,
    onehot_to_indices,
    operator_space,
    search_space_cardinality,
)


class TestOperatorSpace:
    def test_twelve_operators_non_linear_first(self):
        specs = operator_space()
        assert len(specs) == NUM_OPERATORS == 12
        assert specs[0] == OperatorSpec(linear=False, kernel=3, expansion=3)
        assert specs[5] == OperatorSpec(linear=False, kernel=7, expansion=6)
        assert specs[6] == OperatorSpec(linear=True, kernel=3, expansion=3)
        assert all(s.linear for s in specs[6:]) and not any(s.linear for s in specs[:6])

    def test_cardinality(self):
        assert search_space_cardinality(22) == 12 ** 22
        assert search_space_cardinality(6) == 2985984


class TestSupernetConfig:
    def test_desk_defaults(self):
        cfg = SupernetConfig()
        assert cfg.num_layers == 6
        assert cfg.total_stride == 8
        assert cfg.min_resolution == 8

    def test_channel_chain_must_connect(self):
        with pytest.raises(ValidationError, match="c_in"):
            SupernetConfig(stem_channels=4, layers=[LayerSpec(c_in=8, c_out=8)])

    def test_bad_stride(self):
        with pytest.raises(ValidationError):
            LayerSpec(c_in=4, c_out=4, stride=3)

    def test_input_must_divide_by_stride(self):
        with pytest.raises(ValidationError, match="stride"):
            SupernetConfig(input_shape=(3, 12, 12), stem_channels=4,
                           layers=[LayerSpec(c_in=4, c_out=4, stride=2), LayerSpec(c_in=4, c_out=4, stride=2)])


class TestMBConvOperator:
    @pytest.mark.parametrize("kernel", [3, 5, 7])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_shape_matches_same_padding(self, rng, kernel, stride):
        op = MBConvOperator(4, 6, stride, OperatorSpec(False, kernel, 3), rng=rng)
        out = op(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
        assert out.shape == (2, 6, 8 // stride, 8 // stride)

    def test_linear_operator_output_in_relu6_range(self, rng):
        op = MBConvOperator(4, 4, 1, OperatorSpec(True, 3, 3), rng=rng)
        out = op(rng.normal(scale=10.0, size=(2, 4, 6, 6)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 6.0

    def test_residual_only_when_shapes_match(self, rng):
        assert MBConvOperator(4, 4, 1, OperatorSpec(False, 3, 3), rng=rng).residual
        assert not MBConvOperator(4, 8, 1, OperatorSpec(False, 3, 3), rng=rng).residual
        assert not MBConvOperator(4, 4, 2, OperatorSpec(False, 3, 3), rng=rng).residual

    def test_channel_mismatch(self, rng):
        op = MBConvOperator(4, 4, 1, OperatorSpec(False, 3, 3), rng=rng)
        with pytest.raises(ShapeMismatchError):
            op(np.zeros((2, 3, 6, 6), dtype=np.float32))

    def test_graft_only_touches_linear_operators(self, rng):
        linear = MBConvOperator(4, 4, 1, OperatorSpec(True, 3, 3), rng=rng)
        linear.set_graft(0.25)
        assert linear.act1.eps == 0.25 and linear.act2.eps == 0.25
        relu = MBConvOperator(4, 4, 1, OperatorSpec(False, 3, 3), rng=rng)
        relu.set_graft(0.25)
        assert not hasattr(relu.act1, "eps")


class TestSupernet:
    def test_every_path_runs(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng)
        x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
        for idx in (0, 5, 6, 11):
            logits = supernet.forward_path(x, [idx, idx])
            supernet.release_caches()
            assert logits.shape == (2, tiny_supernet_cfg.num_classes)

    def test_mixed_forward_fills_mixture_grads(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng)
        x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
        weights = np.full((2, NUM_OPERATORS), 1.0 / NUM_OPERATORS)
        logits = supernet.forward_mixed(x, weights)
        supernet.backward(np.ones_like(logits))
        assert supernet.mixture_grads.shape == (2, NUM_OPERATORS)

    def test_path_gate_gradient(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng)
        x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
        logits = supernet.forward_path(x, [1, 7], gates=[1.0, 1.0])
        supernet.backward(np.ones_like(logits) / logits.size)
        assert supernet.gate_grads.shape == (2,)

    def test_path_length_checked(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng)
        with pytest.raises(ArchitectureError):
            supernet.forward_path(np.zeros((2, 3, 16, 16), dtype=np.float32), [0])

    def test_construction_is_seeded(self, tiny_supernet_cfg):
        a = build_supernet(tiny_supernet_cfg, np.random.default_rng(3)).state_dict()
        b = build_supernet(tiny_supernet_cfg, np.random.default_rng(3)).state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestEncoding:
    def test_argmax_with_lowest_index_ties(self):
        alpha = np.array([[0.0, 2.0, 2.0], [1.0, 1.0, 1.0]])
        onehot = encode_onehot(alpha)
        assert onehot_to_indices(onehot) == [1, 0]

    def test_indices_round_trip(self):
        assert onehot_to_indices(indices_to_onehot([3, 11, 0])) == [3, 11, 0]

    @pytest.mark.parametrize("bad", [
        np.zeros((2, 12)),
        np.array([[1, 1] + [0] * 10, [1] + [0] * 11]),
        np.array([[0.5, 0.5] + [0] * 10]),
    ])
    def test_malformed_onehot(self, bad):
        with pytest.raises(ArchitectureError):
            onehot_to_indices(bad)

    def test_out_of_range_index(self):
        with pytest.raises(ArchitectureError):
            indices_to_onehot([12])

    def test_decode_copies_selected_weights(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng)
        network = decode_architecture(indices_to_onehot([2, 9]), supernet)
        assert network.arch == [2, 9]
        chosen = supernet.layers[1].operators[9]
        np.testing.assert_array_equal(network.layers[1].expand.weight.data, chosen.expand.weight.data)
        network.layers[1].expand.weight.data[...] = 0.0
        assert np.any(chosen.expand.weight.data != 0.0)

    def test_decoded_network_matches_supernet_path(self, tiny_supernet_cfg, rng):
        supernet = build_supernet(tiny_supernet_cfg, rng).eval()
        network = decode_architecture(indices_to_onehot([4, 8]), supernet)
        x = rng.normal(size=(3, 3, 16, 16)).astype(np.float32)
        expected = supernet.forward_path(x, [4, 8])
        supernet.release_caches()
        np.testing.assert_allclose(network.predict(x), expected, atol=1e-6)


class TestNetwork:
    def test_depth_counts(self, tiny_supernet_cfg, rng):
        network = build_network(tiny_supernet_cfg, [0, 6], rng)
        assert network.searchable_depth() == 6
        assert network.depth() == 8
        assert len(network.linear_operators()) == 1

    def test_predict_restores_training_mode(self, tiny_supernet_cfg, rng):
        network = build_network(tiny_supernet_cfg, [1, 1], rng)
        network.predict(rng.normal(size=(4, 3, 16, 16)).astype(np.float32), batch_size=3)
        assert network.training


class TestOperatorLinearity:
    """The pre-activation map of a linear operator is affine; a ReLU6 operator is not."""

    A, B = 1.5, -0.5

    def _operator(self, rng, index):
        op = MBConvOperator(4, 8, 1, operator_space()[index], rng=rng)
        for _, bn in op.batch_norms():
            c = bn.gamma.shape[0]
            bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
            bn.beta.data = rng.normal(scale=0.1, size=c).astype(np.float32)
            bn.running_mean.data = rng.normal(scale=0.1, size=c).astype(np.float32)
            bn.running_var.data = rng.uniform(0.5, 2.0, c).astype(np.float32)
        return op.eval()

    def _violation(self, op, rng):
        shape = (2, 4, 8, 8)
        x = rng.normal(scale=0.5, size=shape).astype(np.float32)
        y = rng.normal(scale=0.5, size=shape).astype(np.float32)
        zero = np.zeros(shape, dtype=np.float32)

        def centred(v):
            out = op.pre_activation(v) - op.pre_activation(zero)
            op.release_caches()
            return out

        combined = (self.A * x + self.B * y).astype(np.float32)
        return float(np.max(np.abs(centred(combined) - self.A * centred(x) - self.B * centred(y))))

    @pytest.mark.parametrize("index", range(6, 12))
    def test_linear_operators_are_affine(self, rng, index):
        op = self._operator(rng, index)
        assert not op.residual
        assert self._violation(op, rng) <= 1e-4

    @pytest.mark.parametrize("index", range(6))
    def test_relu6_operators_break_linearity(self, rng, index):
        assert self._violation(self._operator(rng, index), rng) > 1e-2
