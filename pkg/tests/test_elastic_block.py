"""Elastic bottleneck / dense layers against hand-written reference blocks."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastic_cnn import ops
from elastic_cnn.blocks import (
    DENSENET, RESNEXT, BranchSpec, ElasticBlockSpec, ElasticBottleneck, ElasticDenseLayer,
    build_block, densenet_elastic_block, elastic_forward, resnext_elastic_block, split_branches,
)
from elastic_cnn.errors import ConfigError, UsageError
from elastic_cnn.nn import Conv2d
from elastic_cnn.tensor import DTYPE, Tensor, no_grad


def conv_bn(x, conv, bn):
    return ops.batch_norm(ops.conv2d(x, conv.params), bn.params)


def reference_bottleneck(x, br):
    """Plain ResNeXt branch: 1x1-BN-ReLU, grouped 3x3-BN-ReLU, 1x1-BN."""
    z = ops.relu(conv_bn(x, br.conv1, br.bn1))
    z = ops.relu(conv_bn(z, br.conv2, br.bn2))
    return conv_bn(z, br.conv3, br.bn3)


def reference_dense(stream, layer):
    br = layer.branches[0]
    z = ops.relu(ops.batch_norm(stream, layer.norm.params))
    z = ops.relu(conv_bn(z, br.conv1, br.bn1))
    return np.concatenate([stream.data, ops.conv2d(z, br.conv2.params).data], axis=1)


def resnext_spec(cin=16, width=16, cout=16, branches=None, **kw):
    return ElasticBlockSpec(RESNEXT, cin, width, cout, branches or split_branches(4), **kw)


def image(rng, c=16, side=8, n=2):
    return Tensor(rng.standard_normal((n, c, side, side)).astype(DTYPE))


def weight_count(module):
    return sum(t.size for name, t in module.named_parameters() if name.endswith("weight"))


class TestSpecValidation:
    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="sum"):
            resnext_spec(branches=(BranchSpec(1, Fraction(1, 2), 2),))

    def test_odd_cardinality_split_rejected(self):
        with pytest.raises(ConfigError):
            split_branches(3)

    def test_width_not_divisible(self):
        with pytest.raises(ConfigError, match="not an integer"):
            resnext_spec(width=10, branches=split_branches(4, (Fraction(1, 4), Fraction(3, 4))))

    def test_bad_scale_ratio(self):
        with pytest.raises(ConfigError):
            BranchSpec(0)

    def test_densenet_channels(self):
        with pytest.raises(ConfigError, match="growth"):
            ElasticBlockSpec(DENSENET, 8, 8, 10, (BranchSpec(),), residual=False, growth=4)

    def test_indivisible_resolution(self, rng):
        block = build_block(resnext_spec(), rng)
        with pytest.raises(ConfigError, match="scale ratio 2"):
            block(image(rng, side=7))


class TestResnextBlock:
    def test_degenerate_bit_identical_to_baseline(self, rng):
        spec = resnext_spec(branches=(BranchSpec(1, Fraction(1), 4),))
        block = build_block(spec, rng)
        x = image(rng)
        ref = ops.relu(reference_bottleneck(x, block.branches[0]) + x)
        out = resnext_elastic_block(x, block)
        assert out.data.tobytes() == ref.data.tobytes()

    def test_degenerate_with_projection(self, rng):
        spec = resnext_spec(cout=32, branches=(BranchSpec(1, Fraction(1), 4),))
        block = build_block(spec, rng)
        x = image(rng)
        shortcut = conv_bn(x, block.projection, block.projection_bn)
        ref = ops.relu(reference_bottleneck(x, block.branches[0]) + shortcut)
        assert block(x).data.tobytes() == ref.data.tobytes()

    def test_two_branch_shape(self, rng):
        block = build_block(resnext_spec(cout=24), rng)
        out = block(Tensor(rng.standard_normal((1, 16, 8, 8)).astype(DTYPE)))
        assert out.shape == (1, 24, 8, 8)

    def test_branch_additivity(self, rng):
        block = build_block(resnext_spec(), rng)
        block.eval()
        x = image(rng)
        with no_grad():
            parts = []
            for br in block.branches:
                z = x if br.scale_ratio == 1 else ops.avg_pool2(x)
                z = reference_bottleneck(z, br)
                if br.scale_ratio > 1:
                    z = ops.bilinear_resize(z, 8, 8)
                parts.append(z.data)
            expected = np.maximum(parts[0] + parts[1] + x.data, 0)
            np.testing.assert_allclose(block(x).data, expected, atol=1e-6, rtol=0)

    def test_low_branch_ablation(self, rng):
        block = build_block(resnext_spec(), rng)
        block.eval()
        low = next(b for b in block.branches if b.scale_ratio == 2)
        low.conv3.params.weight.data[:] = 0
        low.bn3.params.running_mean[:] = 0
        x = image(rng)
        high = next(b for b in block.branches if b.scale_ratio == 1)
        with no_grad():
            expected = ops.relu(reference_bottleneck(x, high) + x).data
            np.testing.assert_allclose(block(x).data, expected, atol=1e-6, rtol=0)

    def test_zero_weights_identity_bn_gives_relu(self, rng):
        block = build_block(resnext_spec(), rng)
        block.eval()
        for _, t in block.named_parameters():
            if t.ndim == 4:
                t.data[:] = 0
        x = image(rng)
        np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0))

    def test_weight_params_match_baseline(self, rng):
        spec = resnext_spec(width=32, branches=split_branches(8))
        elastic, base = build_block(spec, rng), build_block(spec.baseline(), rng)
        assert weight_count(elastic) == weight_count(base)
        # each extra branch carries its own output BN (gamma, beta)
        extra = elastic.num_parameters() - base.num_parameters()
        assert extra == 2 * spec.out_channels * (len(spec.branches) - 1)

    def test_fewer_macs_than_baseline(self, rng):
        spec = resnext_spec(width=32, branches=split_branches(8))
        x = image(rng)
        with no_grad(), ops.count_macs() as el:
            build_block(spec, rng)(x)
        with no_grad(), ops.count_macs() as bl:
            build_block(spec.baseline(), rng)(x)
        assert sum(m for _, m in el) < sum(m for _, m in bl)

    def test_split_ratio_flops_monotonic(self, rng):
        x = image(rng, c=32)
        totals = []
        for frac in (Fraction(3, 4), Fraction(1, 2), Fraction(1, 4)):
            spec = resnext_spec(cin=32, width=32, cout=32, branches=split_branches(8, (frac, 1 - frac)))
            with no_grad(), ops.count_macs() as rec:
                build_block(spec, rng)(x)
            totals.append(sum(m for _, m in rec))
        assert totals[0] > totals[1] > totals[2]

    def test_paper_split(self):
        branches = split_branches(32)
        assert [(b.scale_ratio, b.cardinality) for b in branches] == [(1, 16), (2, 16)]

    @given(
        ratios=st.sampled_from([(1,), (1, 2), (2, 1), (1, 4), (1, 2, 4)]),
        mult=st.integers(1, 3), card=st.sampled_from([1, 2]), method=st.sampled_from(["avgpool", "bilinear", "nearest"]),
        seed=st.integers(0, 2**31),
    )
    def test_resolution_preserved(self, ratios, mult, card, method, seed):
        rng = np.random.default_rng(seed)
        q = len(ratios)
        fracs = [Fraction(1, q)] * q
        branches = split_branches(card * q, fracs, ratios)
        side = 4 * mult
        spec = resnext_spec(cin=8, width=8 * q, cout=8, branches=branches, resample=method)
        x = Tensor(rng.standard_normal((1, 8, side, side)).astype(DTYPE))
        assert build_block(spec, rng)(x).shape == x.shape


class TestDenseLayer:
    def spec(self, branches=None, growth=4, cin=8, width=8):
        return ElasticBlockSpec(DENSENET, cin, width, cin + growth,
                                branches or (BranchSpec(1, Fraction(1, 2)), BranchSpec(2, Fraction(1, 2))),
                                residual=False, growth=growth)

    def test_degenerate_equals_plain_dense_layer(self, rng):
        layer = build_block(self.spec(branches=(BranchSpec(),)), rng)
        x = image(rng, c=8)
        assert densenet_elastic_block(x, layer).data.tobytes() == reference_dense(x, layer).tobytes()

    def test_output_channels(self, rng):
        layer = build_block(self.spec(growth=32, width=128), rng)
        out = layer(image(rng, c=8))
        assert out.shape == (2, 40, 8, 8)
        assert [b.conv1.params.out_channels for b in layer.branches] == [64, 64]

    def test_weight_params_match_baseline(self, rng):
        spec = self.spec()
        assert weight_count(build_block(spec, rng)) == weight_count(build_block(spec.baseline(), rng))


def test_elastic_forward_rejects_other_modules(rng):
    with pytest.raises(UsageError):
        elastic_forward(image(rng), Conv2d(16, 16, 1, rng))


def test_builder_dispatch(rng):
    assert isinstance(build_block(resnext_spec(), rng), ElasticBottleneck)
    assert isinstance(build_block(TestDenseLayer().spec(), rng), ElasticDenseLayer)
