"""Large-kernel hierarchical backbone.

Layout: a 4x4 stride-4 stem, then four stages. Every stage starts with a 3x3
transition conv that sets the stage width (stride 2 on downsampling stages,
so feature strides run 4/8/16/32), followed by `depth` residual blocks at
stride 1:

    pw 1x1 expand (ratio e) -> depthwise rep-block (KxK + small kxk +
    identity BN branches) -> pw 1x1 project, with a residual connection.

All convs are bias-free and followed by batch norm. Weights come from one
SplitMix64 stream in declaration order, so a (config, seed) pair rebuilds
bit-identical weights anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, ShapeError, StateError
from .prng import SplitMix64, fan_in_uniform
from .reparam import ConvBN, RepBlockSpec, merge_rep_block, rep_block_forward
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    Tensor4,
    batchnorm_infer,
    conv2d,
    output_shape,
    relu,
)

KERNEL_RANGE = (7, 13)


@dataclass(frozen=True)
class BackboneConfig:
    stem_out_ch: int = 64
    stage_channels: tuple[int, int, int, int] = (256, 256, 384, 512)
    stage_depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    stage_kernels: tuple[int, int, int, int] = (13, 11, 9, 7)
    small_kernel: int = 3
    downsample: tuple[bool, bool, bool, bool] = (False, True, True, True)
    expansion: int = 2
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "stage_kernels", "downsample"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 4:
                raise ConfigError(f"{name}: expected 4 entries, got {len(value)}")
        if self.stem_out_ch < 1:
            raise ConfigError(f"stem_out_ch: must be positive, got {self.stem_out_ch}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels: must be positive, got {self.stage_channels}")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(
                f"stage_channels: must be non-decreasing, got {self.stage_channels}"
            )
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths: must be positive, got {self.stage_depths}")
        lo, hi = KERNEL_RANGE
        for k in self.stage_kernels:
            if k % 2 == 0 or not lo <= k <= hi:
                raise ConfigError(
                    f"stage_kernels: kernel {k} outside odd range [{lo}, {hi}]"
                )
        if self.small_kernel % 2 == 0 or self.small_kernel < 1:
            raise ConfigError(f"small_kernel: must be odd, got {self.small_kernel}")
        if self.small_kernel > min(self.stage_kernels):
            raise ConfigError(
                f"small_kernel: {self.small_kernel} exceeds smallest stage kernel"
            )
        if sum(self.downsample) != 3 or self.downsample[0]:
            raise ConfigError(
                "downsample: stage 1 must keep stride 4 and exactly three stages "
                f"must downsample, got {self.downsample}"
            )
        if self.expansion < 1:
            raise ConfigError(f"expansion: must be at least 1, got {self.expansion}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps: must be positive, got {self.bn_eps}")


@dataclass
class BlockSpec:
    """One residual stage block; `merged` replaces `rep` at inference."""

    pw1: ConvBN
    pw2: ConvBN
    rep: RepBlockSpec | None = None
    merged: ConvSpec | None = None

    def __post_init__(self):
        if self.rep is None and self.merged is None:
            raise StateError("block needs a branch-form rep block or a merged conv")


@dataclass
class StageSpec:
    transition: ConvBN
    blocks: list[BlockSpec]


@dataclass
class BackboneSpec:
    config: BackboneConfig
    stem: ConvBN
    stages: list[StageSpec]

    @property
    def dtype(self) -> np.dtype:
        return self.stem.conv.dtype

    @property
    def out_ch(self) -> int:
        return self.config.stage_channels[-1]


def _draw_conv(
    rng: SplitMix64,
    in_ch: int,
    out_ch: int,
    kernel: int,
    dtype,
    stride: int = 1,
    groups: int = 1,
    padding: int | None = None,
) -> ConvSpec:
    if padding is None:
        padding = (kernel - 1) // 2
    fan_in = (in_ch // groups) * kernel * kernel
    weights = fan_in_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in, dtype)
    return ConvSpec(
        in_ch, out_ch, (kernel, kernel), (stride, stride), (1, 1), (padding, padding),
        groups, weights,
    )


def _draw_bn(rng: SplitMix64, channels: int, eps: float, dtype) -> BatchNormSpec:
    return BatchNormSpec(
        gamma=rng.uniform(channels, 0.9, 1.1).astype(dtype),
        beta=rng.uniform(channels, -0.05, 0.05).astype(dtype),
        mean=rng.uniform(channels, -0.05, 0.05).astype(dtype),
        var=rng.uniform(channels, 0.9, 1.1).astype(dtype),
        eps=eps,
    )


def _draw_conv_bn(rng, in_ch, out_ch, kernel, dtype, eps, stride=1, groups=1, padding=None):
    conv = _draw_conv(rng, in_ch, out_ch, kernel, dtype, stride, groups, padding)
    return ConvBN(conv, _draw_bn(rng, out_ch, eps, dtype))


def build_backbone(
    cfg: BackboneConfig, dtype=np.float32, rng: SplitMix64 | None = None
) -> BackboneSpec:
    """Deterministically materialize the backbone for (config, seed)."""
    if rng is None:
        rng = SplitMix64(cfg.seed)
    eps = cfg.bn_eps
    stem = _draw_conv_bn(rng, 3, cfg.stem_out_ch, 4, dtype, eps, stride=4, padding=0)
    stages = []
    prev_ch = cfg.stem_out_ch
    for ch, depth, kernel, down in zip(
        cfg.stage_channels, cfg.stage_depths, cfg.stage_kernels, cfg.downsample
    ):
        transition = _draw_conv_bn(rng, prev_ch, ch, 3, dtype, eps, stride=2 if down else 1)
        blocks = []
        expanded = ch * cfg.expansion
        for _ in range(depth):
            pw1 = _draw_conv_bn(rng, ch, expanded, 1, dtype, eps)
            large = _draw_conv_bn(rng, expanded, expanded, kernel, dtype, eps, groups=expanded)
            small = _draw_conv_bn(
                rng, expanded, expanded, cfg.small_kernel, dtype, eps, groups=expanded
            )
            ident = _draw_bn(rng, expanded, eps, dtype)
            pw2 = _draw_conv_bn(rng, expanded, ch, 1, dtype, eps)
            blocks.append(BlockSpec(pw1, pw2, rep=RepBlockSpec(large, small, ident)))
        stages.append(StageSpec(transition, blocks))
        prev_ch = ch
    return BackboneSpec(cfg, stem, stages)


def merge_backbone(spec: BackboneSpec) -> None:
    """Populate the merged single-kernel form of every rep block, in place."""
    for stage in spec.stages:
        for block in stage.blocks:
            if block.rep is None:
                raise StateError("cannot merge a backbone without branch weights")
            block.merged = merge_rep_block(block.rep)


def _conv_bn_act(x: Tensor4, cb: ConvBN, method: str) -> Tensor4:
    return relu(batchnorm_infer(conv2d(x, cb.conv, method), cb.bn))


def _block_forward(x: Tensor4, block: BlockSpec, merged: bool, method: str) -> Tensor4:
    t = _conv_bn_act(x, block.pw1, method)
    if merged:
        if block.merged is None:
            raise StateError("merged forward requested but blocks are not merged")
        r = conv2d(t, block.merged, method)
    else:
        if block.rep is None:
            raise StateError("branch forward requested but branch weights are absent")
        r = rep_block_forward(block.rep, t, conv=lambda a, s: conv2d(a, s, method))
    r = relu(r)
    u = batchnorm_infer(conv2d(r, block.pw2.conv, method), block.pw2.bn)
    return Tensor4(x.data + u.data)


def backbone_forward(
    spec: BackboneSpec, x: Tensor4, merged: bool = False, method: str = "gemm"
) -> list[Tensor4]:
    """Run the hierarchy; returns the four stage outputs (strides 4/8/16/32)."""
    if x.c != 3:
        raise ShapeError(f"backbone expects 3 input channels, got {x.c}")
    if x.h % 32 or x.w % 32:
        raise GeometryError(f"input {x.h}x{x.w} must be divisible by 32")
    if x.dtype != spec.dtype:
        raise ShapeError(f"input dtype {x.dtype} != backbone dtype {spec.dtype}")
    y = _conv_bn_act(x, spec.stem, method)
    features = []
    for stage in spec.stages:
        y = _conv_bn_act(y, stage.transition, method)
        for block in stage.blocks:
            y = _block_forward(y, block, merged, method)
        features.append(y)
    return features


def _rep_geometry(block: BlockSpec) -> ConvSpec:
    """Conv geometry of the block's single-kernel form (merged or derivable)."""
    if block.merged is not None:
        return block.merged
    return block.rep.large.conv  # merged shares the large branch's geometry


def count_params(spec: BackboneSpec, merged: bool = False) -> int:
    """Weight + bias element count (batch norm counts its affine pair)."""
    total = spec.stem.conv.param_count() + spec.stem.bn.param_count()
    for stage in spec.stages:
        total += stage.transition.conv.param_count() + stage.transition.bn.param_count()
        for block in stage.blocks:
            for cb in (block.pw1, block.pw2):
                total += cb.conv.param_count() + cb.bn.param_count()
            if merged:
                geom = _rep_geometry(block)
                total += geom.weights.size + geom.out_ch  # merged conv carries a bias
            else:
                rep = block.rep
                if rep is None:
                    raise StateError("branch form absent; cannot count branch parameters")
                total += rep.large.conv.param_count() + rep.large.bn.param_count()
                if rep.small is not None:
                    total += rep.small.conv.param_count() + rep.small.bn.param_count()
                if rep.identity is not None:
                    total += rep.identity.param_count()
    return total


def count_macs(spec: BackboneSpec, h: int, w: int, merged: bool = False) -> int:
    """Multiply-accumulate count of all convolutions for an h x w input."""
    if h % 32 or w % 32:
        raise GeometryError(f"input {h}x{w} must be divisible by 32")
    total = 0
    cur_h, cur_w = output_shape(spec.stem.conv, h, w)
    total += _macs_for(spec.stem.conv, cur_h, cur_w)
    for stage in spec.stages:
        cur_h, cur_w = output_shape(stage.transition.conv, cur_h, cur_w)
        total += _macs_for(stage.transition.conv, cur_h, cur_w)
        for block in stage.blocks:
            total += _macs_for(block.pw1.conv, cur_h, cur_w)
            if merged:
                total += _macs_for(_rep_geometry(block), cur_h, cur_w)
            else:
                rep = block.rep
                if rep is None:
                    raise StateError("branch form absent; cannot count branch MACs")
                total += _macs_for(rep.large.conv, cur_h, cur_w)
                if rep.small is not None:
                    total += _macs_for(rep.small.conv, cur_h, cur_w)
            total += _macs_for(block.pw2.conv, cur_h, cur_w)
    return total


def _macs_for(conv: ConvSpec, oh: int, ow: int) -> int:
    return oh * ow * conv.out_ch * (conv.in_ch // conv.groups) * conv.kernel[0] * conv.kernel[1]
