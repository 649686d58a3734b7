"""Multi-scale feature fusion and the density head.

Three pieces turn the deepest backbone feature into a one-channel density
map at stride 32:

* ASPP: parallel dilated 3x3 convs (one per rate), a 1x1 conv, and a pooled
  branch (global average -> 1x1 conv -> upsample), concatenated in that
  order and projected by a 1x1 conv.
* Contrast context (CAN-style): per pooling scale s, the feature is averaged
  to an s x s grid and upsampled back; the contrast (feature minus the
  smoothed copy) drives a sigmoid-gated 1x1 conv whose weights are
  normalized across scales per pixel, giving a convex per-pixel mixture of
  the smoothed copies. A squeeze-excite gate (reduction r) then reweights
  channels.
* Head: concatenate (backbone, ASPP, context), fuse with a 1x1 conv, project
  to one channel, clamp at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityMap
from .errors import ConfigError, ShapeError
from .prng import SplitMix64, fan_in_uniform
from .reparam import ConvBN
from .tensor import (
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


@dataclass(frozen=True)
class FusionConfig:
    aspp_rates: tuple[int, ...] = (6, 12, 18, 24)
    aspp_branch_ch: int = 128
    aspp_out_ch: int = 256
    can_scales: tuple[int, ...] = (1, 2, 3, 6)
    can_reduction: int = 16
    head_ch: int = 128
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        object.__setattr__(self, "can_scales", tuple(self.can_scales))
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError(f"aspp_rates: need positive rates, got {self.aspp_rates}")
        if not self.can_scales or any(s < 1 for s in self.can_scales):
            raise ConfigError(f"can_scales: need positive scales, got {self.can_scales}")
        for name in ("aspp_branch_ch", "aspp_out_ch", "can_reduction", "head_ch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps: must be positive, got {self.bn_eps}")


@dataclass
class AsppSpec:
    rates: tuple[int, ...]
    dilated: list[ConvBN]  # one 3x3 conv per rate, "same" padding = rate
    conv1x1: ConvBN
    pool_conv: ConvBN
    project: ConvBN

    @property
    def in_ch(self) -> int:
        return self.conv1x1.conv.in_ch

    @property
    def out_ch(self) -> int:
        return self.project.conv.out_ch


@dataclass
class CanSpec:
    scales: tuple[int, ...]
    scale_convs: list[ConvSpec]  # per-scale 1x1, in_ch -> in_ch, with bias
    reduce: ConvSpec  # 1x1, in_ch -> in_ch / r
    restore: ConvSpec  # 1x1, in_ch / r -> in_ch
    reduction: int

    @property
    def in_ch(self) -> int:
        return self.reduce.in_ch


@dataclass
class DensityHeadSpec:
    fuse: ConvBN
    out: ConvSpec  # 1x1 to a single channel

    def __post_init__(self):
        if self.out.out_ch != 1:
            raise ShapeError(f"density head must end in 1 channel, got {self.out.out_ch}")


def effective_receptive_field(k: int, rate: int) -> int:
    """Receptive field of a kxk conv at dilation `rate`: k + (k-1)(rate-1)."""
    if k < 1 or rate < 1:
        raise ConfigError(f"kernel {k} and rate {rate} must be at least 1")
    return k + (k - 1) * (rate - 1)


def _draw_1x1(rng: SplitMix64, in_ch: int, out_ch: int, dtype, bias: bool = True) -> ConvSpec:
    weights = fan_in_uniform(rng, (out_ch, in_ch, 1, 1), in_ch, dtype)
    b = np.zeros(out_ch, dtype=dtype) if bias else None
    return ConvSpec(in_ch, out_ch, (1, 1), weights=weights, bias=b)


def build_aspp(in_ch: int, cfg: FusionConfig, rng: SplitMix64, dtype) -> AsppSpec:
    from .backbone import _draw_bn  # shared deterministic draw helper

    eps = cfg.bn_eps
    ch = cfg.aspp_branch_ch
    dilated = []
    for rate in cfg.aspp_rates:
        fan_in = in_ch * 9
        weights = fan_in_uniform(rng, (ch, in_ch, 3, 3), fan_in, dtype)
        conv = ConvSpec(
            in_ch, ch, (3, 3), (1, 1), (rate, rate), (rate, rate), 1, weights
        )
        dilated.append(ConvBN(conv, _draw_bn(rng, ch, eps, dtype)))
    conv1x1 = ConvBN(_draw_1x1(rng, in_ch, ch, dtype, bias=False), _draw_bn(rng, ch, eps, dtype))
    pool_conv = ConvBN(_draw_1x1(rng, in_ch, ch, dtype, bias=False), _draw_bn(rng, ch, eps, dtype))
    concat_ch = (len(cfg.aspp_rates) + 2) * ch
    project = ConvBN(
        _draw_1x1(rng, concat_ch, cfg.aspp_out_ch, dtype, bias=False),
        _draw_bn(rng, cfg.aspp_out_ch, eps, dtype),
    )
    return AsppSpec(cfg.aspp_rates, dilated, conv1x1, pool_conv, project)


def build_can(in_ch: int, cfg: FusionConfig, rng: SplitMix64, dtype) -> CanSpec:
    if in_ch % cfg.can_reduction:
        raise ConfigError(
            f"can_reduction: {cfg.can_reduction} must divide context channels {in_ch}"
        )
    scale_convs = [_draw_1x1(rng, in_ch, in_ch, dtype) for _ in cfg.can_scales]
    hidden = in_ch // cfg.can_reduction
    reduce = _draw_1x1(rng, in_ch, hidden, dtype)
    restore = _draw_1x1(rng, hidden, in_ch, dtype)
    return CanSpec(cfg.can_scales, scale_convs, reduce, restore, cfg.can_reduction)


def build_head(in_ch: int, cfg: FusionConfig, rng: SplitMix64, dtype) -> DensityHeadSpec:
    from .backbone import _draw_bn

    fuse = ConvBN(
        _draw_1x1(rng, in_ch, cfg.head_ch, dtype, bias=False),
        _draw_bn(rng, cfg.head_ch, cfg.bn_eps, dtype),
    )
    out = _draw_1x1(rng, cfg.head_ch, 1, dtype)
    return DensityHeadSpec(fuse, out)


def _cba(x: Tensor4, cb: ConvBN, method: str) -> Tensor4:
    return relu(batchnorm_infer(conv2d(x, cb.conv, method), cb.bn))


def aspp_forward(f4: Tensor4, spec: AsppSpec, method: str = "gemm") -> Tensor4:
    """Dilated branches + 1x1 + pooled branch, concatenated then projected."""
    if f4.c != spec.in_ch:
        raise ShapeError(f"ASPP expects {spec.in_ch} channels, got {f4.c}")
    branches = [_cba(f4, cb, method) for cb in spec.dilated]
    branches.append(_cba(f4, spec.conv1x1, method))
    pooled = _cba(global_avg_pool(f4), spec.pool_conv, method)
    branches.append(bilinear_upsample(pooled, (f4.h, f4.w)))
    return _cba(concat_channels(branches), spec.project, method)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def can_forward(f: Tensor4, spec: CanSpec, method: str = "gemm") -> Tensor4:
    """Contrast-weighted multi-scale mixture followed by a channel gate."""
    if f.c != spec.in_ch:
        raise ShapeError(f"context module expects {spec.in_ch} channels, got {f.c}")
    smoothed = [
        bilinear_upsample(adaptive_avg_pool(f, (s, s)), (f.h, f.w)) for s in spec.scales
    ]
    weights = []
    for u, conv in zip(smoothed, spec.scale_convs):
        contrast = Tensor4(f.data - u.data)
        weights.append(_sigmoid(conv2d(contrast, conv, method).data))
    total = np.zeros_like(weights[0])
    for w in weights:
        total += w
    context = np.zeros_like(f.data)
    for w, u in zip(weights, smoothed):
        context += (w / total) * u.data
    ctx = Tensor4(context)
    gate = global_avg_pool(ctx)
    gate = relu(conv2d(gate, spec.reduce, method))
    gate = _sigmoid(conv2d(gate, spec.restore, method).data)
    return Tensor4(ctx.data * gate)


def fusion_head(
    f4: Tensor4,
    aspp_out: Tensor4,
    can_out: Tensor4,
    spec: DensityHeadSpec,
    method: str = "gemm",
) -> DensityMap:
    """Concatenate (backbone, ASPP, context), fuse, clamp to a density map."""
    for t in (aspp_out, can_out):
        if (t.n, t.h, t.w) != (f4.n, f4.h, f4.w):
            raise ShapeError(
                f"fusion inputs disagree on (n, h, w): {(t.n, t.h, t.w)} vs "
                f"{(f4.n, f4.h, f4.w)}"
            )
    if f4.n != 1:
        raise ShapeError(f"density head processes one image at a time, got batch {f4.n}")
    z = concat_channels([f4, aspp_out, can_out])
    z = _cba(z, spec.fuse, method)
    out = relu(conv2d(z, spec.out, method))
    return DensityMap(out.data[0, 0])
