import numpy as np
import pytest

from helpers import max_abs_diff
from repsf.errors import ConfigError, ShapeError
from repsf.fusion import (
    DensityHeadSpec,
    FusionConfig,
    _sigmoid,
    aspp_forward,
    build_aspp,
    build_can,
    build_head,
    can_forward,
    effective_receptive_field,
    fusion_head,
)
from repsf.prng import SplitMix64
from repsf.tensor import (
    ConvSpec,
    Tensor4,
    adaptive_avg_pool,
    batchnorm_infer,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    relu,
)

DT = np.float32


def rand_t4(seed, shape):
    rng = SplitMix64(seed)
    return Tensor4(rng.uniform(int(np.prod(shape)), -1.0, 1.0).reshape(shape).astype(DT))


class TestEffectiveReceptiveField:
    def test_rate_six_anchor(self):
        assert effective_receptive_field(3, 6) == 13

    def test_rate_twentyfour_anchor(self):
        assert effective_receptive_field(3, 24) == 49

    def test_no_dilation_is_kernel(self):
        for k in (1, 3, 5, 7):
            assert effective_receptive_field(k, 1) == k

    def test_strictly_increasing_in_rate(self):
        fields = [effective_receptive_field(3, r) for r in range(1, 30)]
        assert all(a < b for a, b in zip(fields, fields[1:]))

    def test_invalid_arguments(self):
        with pytest.raises(ConfigError):
            effective_receptive_field(0, 3)


class TestAspp:
    CFG = FusionConfig(aspp_rates=(2, 4), aspp_branch_ch=4, aspp_out_ch=8,
                       can_scales=(1, 2), can_reduction=2, head_ch=4)

    def build(self, in_ch=6, seed=0):
        return build_aspp(in_ch, self.CFG, SplitMix64(seed), DT)

    def test_output_shape_preserved(self):
        spec = self.build()
        x = rand_t4(1, (1, 6, 20, 15))
        out = aspp_forward(x, spec)
        assert out.shape == (1, 8, 20, 15)

    def test_spatially_constant_input_constant_interior(self):
        spec = self.build()
        x = Tensor4(np.full((1, 6, 24, 24), 0.37, dtype=DT))
        out = aspp_forward(x, spec).data
        margin = max(self.CFG.aspp_rates)  # zero padding breaks constancy near borders
        interior = out[:, :, margin:-margin, margin:-margin]
        spread = interior.max(axis=(0, 2, 3)) - interior.min(axis=(0, 2, 3))
        assert float(spread.max()) <= 1e-6

    def test_matches_manual_branch_composition(self):
        spec = self.build()
        x = rand_t4(2, (1, 6, 10, 9))

        def cba(t, cb):
            return relu(batchnorm_infer(conv2d(t, cb.conv), cb.bn))

        branches = [cba(x, cb) for cb in spec.dilated]
        branches.append(cba(x, spec.conv1x1))
        pooled = cba(global_avg_pool(x), spec.pool_conv)
        branches.append(bilinear_upsample(pooled, (10, 9)))
        expected = cba(concat_channels(branches), spec.project)
        assert np.array_equal(aspp_forward(x, spec).data, expected.data)

    def test_channel_mismatch(self):
        spec = self.build()
        with pytest.raises(ShapeError):
            aspp_forward(rand_t4(0, (1, 5, 8, 8)), spec)

    def test_dilated_branches_use_rate_padding(self):
        spec = self.build()
        assert [cb.conv.dilation[0] for cb in spec.dilated] == [2, 4]
        assert [cb.conv.padding[0] for cb in spec.dilated] == [2, 4]


class TestCan:
    CFG = FusionConfig(aspp_rates=(2,), aspp_branch_ch=4, aspp_out_ch=8,
                       can_scales=(1, 2, 4), can_reduction=4, head_ch=4)

    def build(self, in_ch=8, seed=1):
        return build_can(in_ch, self.CFG, SplitMix64(seed), DT)

    def test_attention_width_from_reduction(self):
        cfg = FusionConfig(can_reduction=16)
        spec = build_can(512, cfg, SplitMix64(0), DT)
        assert spec.reduce.out_ch == 32
        assert spec.restore.out_ch == 512

    def test_indivisible_reduction_rejected(self):
        with pytest.raises(ConfigError, match="can_reduction"):
            build_can(10, FusionConfig(can_reduction=4), SplitMix64(0), DT)

    def test_output_shape_equals_input(self):
        spec = self.build()
        x = rand_t4(3, (1, 8, 8, 8))
        assert can_forward(x, spec).shape == x.shape

    def test_constant_input_has_zero_contrast(self):
        # power-of-two geometry: pooled means and upsampling reproduce the
        # constant exactly, so every contrast map is identically zero
        spec = self.build()
        x = Tensor4(np.full((1, 8, 8, 8), 0.613, dtype=DT))
        for s in spec.scales:
            u = bilinear_upsample(adaptive_avg_pool(x, (s, s)), (8, 8))
            assert np.array_equal(u.data, x.data)
        out = can_forward(x, spec).data
        assert float(np.ptp(out.reshape(8, -1), axis=1).max()) == 0.0

    def test_uniform_weights_give_multiscale_average(self):
        spec = self.build()
        for conv in spec.scale_convs:
            conv.weights[:] = 0.0
            conv.bias[:] = 0.0  # sigmoid(0) = 0.5 per scale, uniform after normalizing
        spec.restore.bias[:] = 30.0  # gate saturates at 1
        x = rand_t4(4, (1, 8, 8, 8))
        expected = np.zeros_like(x.data)
        for s in spec.scales:
            expected += bilinear_upsample(adaptive_avg_pool(x, (s, s)), (8, 8)).data
        expected /= len(spec.scales)
        assert max_abs_diff(can_forward(x, spec).data, expected) <= 1e-6

    def test_scale_weights_sum_to_one(self):
        spec = self.build()
        x = rand_t4(5, (1, 8, 6, 6))
        smoothed = [
            bilinear_upsample(adaptive_avg_pool(x, (s, s)), (6, 6)) for s in spec.scales
        ]
        weights = [
            _sigmoid(conv2d(Tensor4(x.data - u.data), conv).data)
            for u, conv in zip(smoothed, spec.scale_convs)
        ]
        total = sum(weights)
        normalized = sum(w / total for w in weights)
        assert max_abs_diff(normalized, np.ones_like(normalized)) <= 1e-6


class TestFusionHead:
    def build(self, in_ch=12, seed=2):
        cfg = FusionConfig(head_ch=4)
        return build_head(in_ch, cfg, SplitMix64(seed), DT)

    def test_output_is_nonnegative_density_map(self):
        spec = self.build()
        f4 = rand_t4(6, (1, 4, 5, 7))
        a = rand_t4(7, (1, 4, 5, 7))
        c = rand_t4(8, (1, 4, 5, 7))
        dm = fusion_head(f4, a, c, spec)
        assert (dm.h, dm.w) == (5, 7)
        assert float(dm.values.min()) >= 0.0

    def test_zero_inputs_zero_bias_give_zero_map(self):
        spec = self.build()
        spec.fuse.bn.beta[:] = 0.0  # "zero biases": no shift anywhere in the head
        spec.fuse.bn.mean[:] = 0.0
        zero = Tensor4(np.zeros((1, 4, 6, 6), dtype=DT))
        dm = fusion_head(zero, zero, zero, spec)
        assert dm.count() == 0.0

    def test_matches_manual_composition(self):
        spec = self.build()
        f4 = rand_t4(9, (1, 4, 6, 6))
        a = rand_t4(10, (1, 4, 6, 6))
        c = rand_t4(11, (1, 4, 6, 6))
        z = concat_channels([f4, a, c])
        z = relu(batchnorm_infer(conv2d(z, spec.fuse.conv), spec.fuse.bn))
        expected = relu(conv2d(z, spec.out)).data[0, 0]
        assert np.array_equal(fusion_head(f4, a, c, spec).values, expected)

    def test_spatial_mismatch_rejected(self):
        spec = self.build()
        with pytest.raises(ShapeError):
            fusion_head(
                rand_t4(0, (1, 4, 6, 6)), rand_t4(1, (1, 4, 6, 5)),
                rand_t4(2, (1, 4, 6, 6)), spec,
            )

    def test_head_must_end_in_one_channel(self, rng):
        w = rng.uniform(-1, 1, (2, 4, 1, 1)).astype(DT)
        out = ConvSpec(4, 2, (1, 1), weights=w, bias=np.zeros(2, dtype=DT))
        fuse = self.build().fuse
        with pytest.raises(ShapeError):
            DensityHeadSpec(fuse=fuse, out=out)
