import numpy as np
import pytest

from utils.common.errors import ShapeMismatchError, TransformError, UnsupportedMergeError
from utils.nas import tensor as T
from utils.nas.search_space import MBConvOperator, OperatorSpec, build_network
from utils.nas.tensor import BatchNormState, ConvWeights, Tensor
from utils.nas.transform import (
    CollapsedConv,
    collapse_mbconv,
    depth_report,
    depthwise_to_dense,
    fold_bn,
    fold_mbconv,
    merge_conv_pair,
    shallow_skeleton,
    transform_network,
    verify_equivalence,
)


def _conv(rng, c_in, c_out, k, stride=1, padding=0, groups=1, dtype=np.float64):
    weight = rng.normal(size=(c_in, c_out // groups, k, k)).astype(dtype)
    return ConvWeights(Tensor(weight), Tensor(rng.normal(size=c_out).astype(dtype)), stride, padding, groups)


def _bn_state(channels, gamma=None, beta=None, mean=None, var=None, dtype=np.float64):
    def tensor(value, default):
        return Tensor(np.asarray(default if value is None else value, dtype=dtype) * np.ones(channels, dtype=dtype))
    return BatchNormState(tensor(gamma, 1.0), tensor(beta, 0.0), tensor(mean, 0.0), tensor(var, 1.0), mode="infer")


def randomise_bn(module, rng):
    """Give every batch norm non-trivial affine terms and running statistics."""
    for _, bn in module.batch_norms():
        c = bn.gamma.shape[0]
        dtype = bn.gamma.dtype
        bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(dtype)
        bn.beta.data = rng.normal(scale=0.1, size=c).astype(dtype)
        bn.running_mean.data = rng.normal(scale=0.1, size=c).astype(dtype)
        bn.running_var.data = rng.uniform(0.5, 2.0, c).astype(dtype)
    return module


def _linear_op(rng, c_in=4, c_out=4, stride=1, kernel=3, expansion=3, dtype=np.float64):
    op = MBConvOperator(c_in, c_out, stride, OperatorSpec(True, kernel, expansion), rng=rng, dtype=dtype)
    randomise_bn(op, rng)
    op.eval()
    return op


class TestFoldBN:
    def test_neutral_bn_keeps_weights(self, rng):
        conv = _conv(rng, 3, 4, 3)
        folded = fold_bn(conv, _bn_state(4))
        np.testing.assert_allclose(folded.weight.data, conv.weight.data, rtol=1e-5)

    def test_uniform_gamma_doubles_weights(self, rng):
        conv = _conv(rng, 3, 4, 3)
        folded = fold_bn(conv, _bn_state(4, gamma=2.0))
        np.testing.assert_allclose(folded.weight.data, 2.0 * conv.weight.data / np.sqrt(1.0 + 1e-5), rtol=1e-12)

    @pytest.mark.parametrize("groups", [1, 4])
    def test_folded_conv_matches_conv_then_bn(self, rng, groups):
        conv = _conv(rng, 4, 8, 3, padding=1, groups=groups, dtype=np.float32)
        bn = _bn_state(8, gamma=rng.uniform(0.5, 2, 8), beta=rng.normal(size=8), mean=rng.normal(size=8),
                       var=rng.uniform(0.5, 2, 8), dtype=np.float32)
        x = rng.normal(scale=0.3, size=(2, 4, 6, 6)).astype(np.float32)
        expected = T.batch_norm(T.conv2d(x, conv), bn)
        assert np.max(np.abs(T.conv2d(x, fold_bn(conv, bn)) - expected)) <= 1e-5

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            fold_bn(_conv(rng, 3, 4, 1), _bn_state(5))


class TestMergeConvPair:
    def test_kernel_sizes_add(self, rng):
        merged = merge_conv_pair(_conv(rng, 2, 3, 3), _conv(rng, 3, 4, 3))
        assert merged.kernel_size == 5
        assert merged.weight.shape == (2, 4, 5, 5)

    @pytest.mark.parametrize("k1,k2", [(3, 3), (1, 5), (5, 3)])
    def test_composition_on_valid_region(self, rng, k1, k2):
        w1, w2 = _conv(rng, 2, 3, k1), _conv(rng, 3, 4, k2)
        x = rng.normal(size=(2, 2, 9, 9))
        np.testing.assert_allclose(T.conv2d(x, merge_conv_pair(w1, w2)), T.conv2d(T.conv2d(x, w1), w2),
                                   atol=1e-10)

    @pytest.mark.parametrize("k1", [1, 3, 5, 7])
    @pytest.mark.parametrize("k2", [1, 3, 5, 7])
    def test_merged_shape_over_kernel_grid(self, rng, k1, k2):
        w1 = _conv(rng, 2, 3, k1, padding=(k1 - 1) // 2)
        w2 = _conv(rng, 3, 4, k2, padding=(k2 - 1) // 2)
        merged = merge_conv_pair(w1, w2)
        assert merged.weight.shape == (2, 4, k1 + k2 - 1, k1 + k2 - 1)
        assert merged.bias.shape == (4,)
        assert merged.padding == (k1 + k2 - 2) // 2
        x = rng.normal(size=(1, 2, 9, 9))
        assert T.conv2d(x, merged).shape == (1, 4, 9, 9)

    @pytest.mark.parametrize("scale", [-2.0, 0.5, 3.0])
    def test_weight_merge_is_linear_in_each_argument(self, rng, scale):
        w1, w2 = _conv(rng, 2, 3, 3), _conv(rng, 3, 4, 5)
        reference = merge_conv_pair(w1, w2).weight.data
        scaled_first = ConvWeights(Tensor(scale * w1.weight.data), w1.bias)
        scaled_second = ConvWeights(Tensor(scale * w2.weight.data), w2.bias)
        np.testing.assert_allclose(merge_conv_pair(scaled_first, w2).weight.data, scale * reference, atol=1e-12)
        np.testing.assert_allclose(merge_conv_pair(w1, scaled_second).weight.data, scale * reference, atol=1e-12)

    def test_identity_first_conv(self, rng):
        w1 = ConvWeights(Tensor(np.eye(3)[:, :, None, None]), Tensor(rng.normal(size=3)))
        w2 = _conv(rng, 3, 4, 3)
        merged = merge_conv_pair(w1, w2)
        assert np.array_equal(merged.weight.data, w2.weight.data)
        expected_bias = w1.bias.data @ w2.weight.data.sum(axis=(2, 3)) + w2.bias.data
        np.testing.assert_allclose(merged.bias.data, expected_bias, atol=1e-12)

    def test_rejects_strided(self, rng):
        with pytest.raises(UnsupportedMergeError):
            merge_conv_pair(_conv(rng, 2, 3, 3, stride=2), _conv(rng, 3, 4, 3))

    def test_rejects_grouped(self, rng):
        with pytest.raises(UnsupportedMergeError):
            merge_conv_pair(_conv(rng, 4, 4, 3, groups=4), _conv(rng, 4, 4, 1))

    def test_depthwise_expands_block_diagonally(self, rng):
        dw = _conv(rng, 4, 4, 3, padding=1, groups=4)
        dense = depthwise_to_dense(dw)
        x = rng.normal(size=(2, 4, 5, 5))
        np.testing.assert_allclose(T.conv2d(x, dense), T.conv2d(x, dw), atol=1e-12)
        assert dense.weight.data[0, 1].sum() == 0.0


class TestCollapse:
    @pytest.mark.parametrize("c_in,c_out,stride,kernel", [(4, 4, 1, 3), (4, 6, 1, 5), (4, 8, 2, 7), (6, 6, 2, 3)])
    def test_output_shape_law(self, rng, c_in, c_out, stride, kernel):
        collapsed = collapse_mbconv(_linear_op(rng, c_in, c_out, stride, kernel))
        assert collapsed.conv.weight.shape == (c_in, c_out, kernel, kernel)
        assert collapsed.conv.stride == stride

    @pytest.mark.parametrize("c_in,c_out,stride,kernel,expansion", [
        (4, 4, 1, 3, 3), (4, 4, 1, 7, 6), (4, 8, 2, 5, 3), (4, 6, 1, 3, 6),
    ])
    def test_equivalent_in_double_precision(self, rng, c_in, c_out, stride, kernel, expansion):
        op = _linear_op(rng, c_in, c_out, stride, kernel, expansion)
        x = rng.normal(size=(3, c_in, 8, 8))
        expected = op(x)
        op.release_caches()
        assert np.max(np.abs(collapse_mbconv(op)(x) - expected)) <= 1e-10

    def test_equivalent_in_single_precision(self, rng):
        op = _linear_op(rng, 8, 8, 1, 5, 6, dtype=np.float32)
        x = rng.normal(size=(4, 8, 10, 10)).astype(np.float32)
        expected = op(x)
        op.release_caches()
        assert np.max(np.abs(collapse_mbconv(op)(x) - expected)) <= 1e-4

    def test_matches_chained_generic_merges(self, rng):
        op = fold_mbconv(_linear_op(rng, 3, 5, 1, 5, 3))
        expand, depthwise, project = op.expand.weights, op.depthwise.weights, op.project.weights
        chained = merge_conv_pair(merge_conv_pair(expand, depthwise_to_dense(depthwise)), project)
        collapsed = collapse_mbconv(op).conv
        np.testing.assert_allclose(collapsed.weight.data, chained.weight.data, atol=1e-12)
        np.testing.assert_allclose(collapsed.bias.data, chained.bias.data, atol=1e-12)

    @pytest.mark.parametrize("kernel", [3, 5, 7])
    def test_residual_adds_a_centred_identity_kernel(self, rng, kernel):
        op = _linear_op(rng, 4, 4, 1, kernel)
        assert op.residual
        plain = op.clone()
        plain.residual = False
        with_residual, without = collapse_mbconv(op).conv, collapse_mbconv(plain).conv
        dirac = np.zeros((4, 4, kernel, kernel))
        dirac[np.arange(4), np.arange(4), kernel // 2, kernel // 2] = 1.0
        np.testing.assert_allclose(with_residual.weight.data - without.weight.data, dirac, rtol=0, atol=1e-12)
        off_centre = dirac == 0.0
        assert np.array_equal(with_residual.weight.data[off_centre], without.weight.data[off_centre])
        assert np.array_equal(with_residual.bias.data, without.bias.data)

    def test_refuses_non_linear_operator(self, rng):
        op = MBConvOperator(4, 4, 1, OperatorSpec(False, 3, 3), rng=rng)
        with pytest.raises(TransformError):
            collapse_mbconv(op)

    def test_refuses_partially_grafted_operator(self, rng):
        op = _linear_op(rng)
        op.set_graft(0.5)
        with pytest.raises(TransformError, match="grafted"):
            collapse_mbconv(op)

    def test_keeps_trailing_relu6(self, rng):
        collapsed = collapse_mbconv(_linear_op(rng))
        assert isinstance(collapsed, CollapsedConv)
        assert collapsed.trailing_relu6
        assert collapsed.conv_layer_count() == 1

    def test_fold_preserves_non_linear_operator(self, rng):
        op = MBConvOperator(4, 4, 1, OperatorSpec(False, 5, 6), rng=rng, dtype=np.float64)
        randomise_bn(op, rng).eval()
        x = rng.normal(size=(2, 4, 7, 7))
        expected = op(x)
        op.release_caches()
        folded = fold_mbconv(op)
        assert folded.is_folded
        np.testing.assert_allclose(folded(x), expected, atol=1e-10)


class TestTransformNetwork:
    def _network(self, cfg, arch, rng, dtype=np.float32):
        network = build_network(cfg, arch, rng, dtype)
        randomise_bn(network, rng)
        return network.eval()

    def test_all_linear_depth(self, tiny_supernet_cfg, rng):
        deep = self._network(tiny_supernet_cfg, [6, 9], rng)
        shallow = transform_network(deep)
        report = depth_report(deep, shallow)
        assert report.searchable_before == 6 and report.searchable_after == 2
        assert report.depth_before == 8 and report.depth_after == 4
        assert report.collapsed == 2 and report.folded == 0

    def test_mixed_network(self, tiny_supernet_cfg, rng):
        deep = self._network(tiny_supernet_cfg, [1, 11], rng)
        report = depth_report(deep, transform_network(deep))
        assert report.collapsed == 1 and report.folded == 1
        assert report.searchable_after == 4

    def test_leaves_source_untouched(self, tiny_supernet_cfg, rng):
        deep = self._network(tiny_supernet_cfg, [7, 8], rng)
        before = deep.state_dict()
        transform_network(deep)
        after = deep.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert not deep.transformed

    def test_idempotent(self, tiny_supernet_cfg, rng):
        shallow = transform_network(self._network(tiny_supernet_cfg, [6, 0], rng))
        again = transform_network(shallow)
        assert again.transformed
        x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(again.predict(x), shallow.predict(x))

    def test_skeleton_structure(self, tiny_supernet_cfg, rng):
        skeleton = shallow_skeleton(tiny_supernet_cfg, [6, 2], rng)
        assert skeleton.transformed
        assert isinstance(skeleton.layers[0], CollapsedConv)
        assert isinstance(skeleton.layers[1], MBConvOperator) and skeleton.layers[1].is_folded


class TestVerifyEquivalence:
    def test_same_object(self, tiny_supernet_cfg, rng):
        network = build_network(tiny_supernet_cfg, [3, 8], rng)
        report = verify_equivalence(network, network, n_samples=4)
        assert report["max_abs"] == 0.0 and report["passed"]

    def test_single_precision_pair(self, tiny_supernet_cfg, rng):
        deep = randomise_bn(build_network(tiny_supernet_cfg, [6, 10], rng), rng).eval()
        report = verify_equivalence(deep, transform_network(deep), n_samples=16, tol=1e-3, rng=rng)
        assert report["passed"]
        assert report["argmax_agreement"] == 1.0

    def test_double_precision_pair(self, tiny_supernet_cfg, rng):
        deep = randomise_bn(build_network(tiny_supernet_cfg, [8, 9], rng, dtype=np.float64), rng).eval()
        report = verify_equivalence(deep, transform_network(deep), n_samples=8, tol=1e-10, rng=rng)
        assert report["max_abs"] <= 1e-10

    def test_perturbed_weight_is_flagged(self, tiny_supernet_cfg, rng):
        deep = randomise_bn(build_network(tiny_supernet_cfg, [6, 6], rng), rng).eval()
        shallow = transform_network(deep)
        shallow.layers[0].conv.weight.data[0, 0, 1, 1] += 1.0
        report = verify_equivalence(deep, shallow, n_samples=16, tol=1e-3, rng=rng)
        assert not report["passed"]
        assert report["max_abs"] > 1e-3
