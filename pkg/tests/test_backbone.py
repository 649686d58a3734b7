import numpy as np
import pytest

from helpers import max_abs_diff, rand_conv_spec
from repsf.backbone import (
    BackboneConfig,
    _macs_for,
    backbone_forward,
    build_backbone,
    count_macs,
    count_params,
    merge_backbone,
)
from repsf.errors import ConfigError, GeometryError, ShapeError, StateError
from repsf.prng import SplitMix64
from repsf.tensor import Tensor4

TINY = BackboneConfig(
    stem_out_ch=4, stage_channels=(8, 8, 8, 8), stage_depths=(1, 1, 1, 1), seed=5
)


def rand_image(seed, h, w, dtype=np.float32):
    rng = SplitMix64(seed)
    return Tensor4(rng.uniform(3 * h * w, -1.0, 1.0).reshape(1, 3, h, w).astype(dtype))


class TestConfigValidation:
    def test_default_accepted(self):
        BackboneConfig()

    def test_boundary_kernels_accepted(self):
        BackboneConfig(stage_kernels=(7, 7, 7, 7))
        BackboneConfig(stage_kernels=(13, 13, 13, 13))

    def test_kernel_out_of_range_names_field(self):
        with pytest.raises(ConfigError, match="stage_kernels"):
            BackboneConfig(stage_kernels=(15, 11, 9, 7))
        with pytest.raises(ConfigError, match="stage_kernels"):
            BackboneConfig(stage_kernels=(8, 11, 9, 7))

    def test_decreasing_channels_rejected(self):
        with pytest.raises(ConfigError, match="stage_channels"):
            BackboneConfig(stage_channels=(256, 128, 384, 512))

    def test_downsample_schedule_enforced(self):
        with pytest.raises(ConfigError, match="downsample"):
            BackboneConfig(downsample=(True, True, True, False))
        with pytest.raises(ConfigError, match="downsample"):
            BackboneConfig(downsample=(False, True, True, False))

    def test_small_kernel_must_fit(self):
        with pytest.raises(ConfigError, match="small_kernel"):
            BackboneConfig(small_kernel=9)


class TestBuild:
    def test_default_structure(self):
        spec = build_backbone(BackboneConfig())
        assert [s.transition.conv.out_ch for s in spec.stages] == [256, 256, 384, 512]
        assert [s.transition.conv.stride[0] for s in spec.stages] == [1, 2, 2, 2]
        kernels = [s.blocks[0].rep.large.conv.kernel[0] for s in spec.stages]
        assert kernels == [13, 11, 9, 7]
        # rep branches are depthwise on the expanded width
        blk = spec.stages[0].blocks[0]
        assert blk.rep.large.conv.groups == blk.pw1.conv.out_ch == 512

    def test_same_seed_bitwise_identical(self):
        a = build_backbone(TINY)
        b = build_backbone(TINY)
        assert np.array_equal(a.stem.conv.weights, b.stem.conv.weights)
        blk_a = a.stages[2].blocks[0].rep.large.conv.weights
        blk_b = b.stages[2].blocks[0].rep.large.conv.weights
        assert np.array_equal(blk_a, blk_b)

    def test_different_seed_differs(self):
        a = build_backbone(TINY)
        b = build_backbone(BackboneConfig(**{**TINY.__dict__, "seed": 6}))
        assert not np.array_equal(a.stem.conv.weights, b.stem.conv.weights)


class TestForward:
    def test_stage_strides_and_channels(self):
        spec = build_backbone(TINY)
        x = rand_image(1, 96, 64)
        feats = backbone_forward(spec, x)
        assert [f.shape for f in feats] == [
            (1, 8, 24, 16), (1, 8, 12, 8), (1, 8, 6, 4), (1, 8, 3, 2),
        ]

    def test_minimal_input_reaches_1x1(self):
        spec = build_backbone(TINY)
        feats = backbone_forward(spec, rand_image(2, 32, 32))
        assert feats[-1].shape == (1, 8, 1, 1)

    def test_640x480_shape_contract(self):
        spec = build_backbone(TINY)
        feats = backbone_forward(spec, rand_image(3, 640, 480))
        assert feats[-1].shape[2:] == (20, 15)

    def test_merged_matches_branch(self):
        spec = build_backbone(TINY)
        x = rand_image(4, 64, 64)
        branch = backbone_forward(spec, x)[-1]
        merge_backbone(spec)
        merged = backbone_forward(spec, x, merged=True)[-1]
        assert max_abs_diff(branch.data, merged.data) <= 1e-4

    def test_forward_is_deterministic(self):
        spec = build_backbone(TINY)
        x = rand_image(5, 32, 32)
        a = backbone_forward(spec, x)[-1]
        b = backbone_forward(spec, x)[-1]
        assert np.array_equal(a.data, b.data)

    def test_indivisible_input_rejected(self):
        spec = build_backbone(TINY)
        with pytest.raises(GeometryError):
            backbone_forward(spec, rand_image(0, 48, 64))

    def test_wrong_channel_count_rejected(self):
        spec = build_backbone(TINY)
        rng = SplitMix64(0)
        x = Tensor4(rng.uniform(4 * 32 * 32).reshape(1, 4, 32, 32).astype(np.float32))
        with pytest.raises(ShapeError):
            backbone_forward(spec, x)

    def test_merged_without_merge_is_state_error(self):
        spec = build_backbone(TINY)
        with pytest.raises(StateError):
            backbone_forward(spec, rand_image(1, 32, 32), merged=True)


class TestCounting:
    def test_single_conv_param_and_mac_formula(self, rng):
        conv = rand_conv_spec(rng, 1, 1, 3)
        assert conv.param_count() == 10
        assert _macs_for(conv, 4, 4) == 144

    def test_merged_params_strictly_fewer(self):
        spec = build_backbone(TINY)
        assert count_params(spec, merged=True) < count_params(spec, merged=False)

    def test_merged_macs_strictly_fewer(self):
        spec = build_backbone(TINY)
        assert count_macs(spec, 64, 64, merged=True) < count_macs(spec, 64, 64, merged=False)

    def test_macs_scale_with_area(self):
        spec = build_backbone(TINY)
        assert count_macs(spec, 128, 128) == pytest.approx(4 * count_macs(spec, 64, 64), rel=0.05)

    def test_counts_match_after_merge(self):
        spec = build_backbone(TINY)
        before = count_params(spec, merged=True)
        merge_backbone(spec)
        assert count_params(spec, merged=True) == before
