"""Structural reparameterization algebra.

A training-style block keeps parallel branches (large KxK conv + BN, small
kxk conv + BN, optional identity BN). At inference the whole block collapses
into one KxK convolution with bias: fold each BN into its conv, embed the
small kernel into the large size, express the identity as a Dirac kernel,
then sum the branches. `equivalence_check` certifies the collapse on seeded
random inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParityError, ShapeError, StateError, StructureError
from .prng import SplitMix64
from .tensor import BatchNormSpec, ConvSpec, Tensor4, batchnorm_infer, conv2d_naive


@dataclass(frozen=True)
class ConvBN:
    """A convolution followed by inference-mode batch norm."""

    conv: ConvSpec
    bn: BatchNormSpec

    def __post_init__(self):
        if self.bn.num_features != self.conv.out_ch:
            raise ShapeError(
                f"batch norm width {self.bn.num_features} != conv out_ch {self.conv.out_ch}"
            )


def _same_padding(kernel: tuple[int, int], dilation: tuple[int, int]) -> tuple[int, int]:
    return (dilation[0] * (kernel[0] - 1) // 2, dilation[1] * (kernel[1] - 1) // 2)


def _require_square_odd(kernel: tuple[int, int], what: str) -> int:
    kh, kw = kernel
    if kh != kw:
        raise ShapeError(f"{what} kernel must be square, got {kernel}")
    if kh % 2 == 0:
        raise ParityError(f"{what} kernel must be odd (no center), got {kh}")
    return kh


@dataclass
class RepBlockSpec:
    """One multi-branch large-kernel block, plus its optional merged form.

    All branches share in_ch/out_ch/groups/stride/dilation and use "same"
    padding. The identity branch is only valid for in_ch == out_ch at
    stride 1. `merged` is populated once by merge_rep_block.
    """

    large: ConvBN
    small: ConvBN | None = None
    identity: BatchNormSpec | None = None
    merged: ConvSpec | None = None

    def __post_init__(self):
        lc = self.large.conv
        self.kernel_size = _require_square_odd(lc.kernel, "large-branch")
        if lc.padding != _same_padding(lc.kernel, lc.dilation):
            raise StructureError("large branch must use same padding")
        if self.small is not None:
            sc = self.small.conv
            k = _require_square_odd(sc.kernel, "small-branch")
            if k > self.kernel_size:
                raise StructureError(
                    f"small kernel {k} exceeds large kernel {self.kernel_size}"
                )
            if (sc.in_ch, sc.out_ch, sc.groups, sc.stride, sc.dilation) != (
                lc.in_ch,
                lc.out_ch,
                lc.groups,
                lc.stride,
                lc.dilation,
            ):
                raise StructureError("small branch geometry must match large branch")
            if sc.padding != _same_padding(sc.kernel, sc.dilation):
                raise StructureError("small branch must use same padding")
        if self.identity is not None:
            if lc.in_ch != lc.out_ch:
                raise StructureError("identity branch requires in_ch == out_ch")
            if lc.stride != (1, 1):
                raise StructureError("identity branch is undefined under stride")
            if self.identity.num_features != lc.out_ch:
                raise ShapeError("identity batch norm width must equal out_ch")

    @property
    def in_ch(self) -> int:
        return self.large.conv.in_ch

    @property
    def out_ch(self) -> int:
        return self.large.conv.out_ch

    @property
    def dtype(self) -> np.dtype:
        return self.large.conv.dtype


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float
    passed: bool


def fold_bn(conv: ConvSpec, bn: BatchNormSpec) -> ConvSpec:
    """Absorb inference batch norm into the preceding convolution.

    W'_o = W_o * g_o,  b'_o = beta_o + (b_o - mean_o) * g_o,
    with g_o = gamma_o / sqrt(var_o + eps); conv'(x) == bn(conv(x)).
    """
    if bn.num_features != conv.out_ch:
        raise ShapeError(f"batch norm width {bn.num_features} != conv out_ch {conv.out_ch}")
    if bn.dtype != conv.dtype:
        raise ShapeError("batch norm dtype must match conv dtype")
    denom_sq = bn.var + conv.dtype.type(bn.eps)
    if np.any(denom_sq <= 0):
        raise NumericError("var + eps must be positive to fold batch norm")
    scale = bn.gamma / np.sqrt(denom_sq)
    bias0 = conv.bias if conv.bias is not None else np.zeros(conv.out_ch, dtype=conv.dtype)
    return ConvSpec(
        conv.in_ch,
        conv.out_ch,
        conv.kernel,
        conv.stride,
        conv.dilation,
        conv.padding,
        conv.groups,
        conv.weights * scale[:, None, None, None],
        bn.beta + (bias0 - bn.mean) * scale,
    )


def embed_kernel(conv: ConvSpec, target: int) -> ConvSpec:
    """Zero-pad a kxk same-padding kernel to KxK without changing the operator."""
    k = _require_square_odd(conv.kernel, "source")
    if target % 2 == 0:
        raise ParityError(f"target kernel must be odd, got {target}")
    if target < k:
        raise ShapeError(f"target kernel {target} smaller than source {k}")
    if conv.padding != _same_padding(conv.kernel, conv.dilation):
        raise StructureError("embed_kernel requires same padding")
    if target == k:
        return conv
    off = (target - k) // 2
    weights = np.zeros(
        (conv.out_ch, conv.in_ch // conv.groups, target, target), dtype=conv.dtype
    )
    weights[:, :, off : off + k, off : off + k] = conv.weights
    return ConvSpec(
        conv.in_ch,
        conv.out_ch,
        (target, target),
        conv.stride,
        conv.dilation,
        _same_padding((target, target), conv.dilation),
        conv.groups,
        weights,
        conv.bias,
    )


def identity_as_conv(channels: int, groups: int, size: int, dtype=np.float64) -> ConvSpec:
    """KxK convolution acting as the identity map (stride 1, same padding)."""
    if size % 2 == 0:
        raise ParityError(f"identity kernel must be odd, got {size}")
    if channels % groups:
        raise ShapeError(f"groups={groups} must divide channels={channels}")
    cin_g = channels // groups
    center = size // 2
    weights = np.zeros((channels, cin_g, size, size), dtype=np.dtype(dtype))
    for o in range(channels):
        weights[o, o % cin_g, center, center] = 1.0
    return ConvSpec(
        channels,
        channels,
        (size, size),
        (1, 1),
        (1, 1),
        (center, center),
        groups,
        weights,
    )


def merge_parallel(convs: list[ConvSpec]) -> ConvSpec:
    """Sum parallel same-geometry convolutions into one: merged(x) == sum conv_i(x).

    Weights and biases are summed in argument order, so a fixed branch order
    gives bit-identical merges.
    """
    if not convs:
        raise ShapeError("merge_parallel requires at least one convolution")
    head = convs[0]
    geom = lambda c: (c.in_ch, c.out_ch, c.groups, c.kernel, c.stride, c.dilation, c.padding)
    for c in convs[1:]:
        if geom(c) != geom(head):
            raise ShapeError(f"branch geometry mismatch: {geom(c)} vs {geom(head)}")
        if c.dtype != head.dtype:
            raise ShapeError("branch dtypes must match")
    weights = head.weights.copy()
    bias = None
    if any(c.bias is not None for c in convs):
        bias = head.bias.copy() if head.bias is not None else np.zeros(head.out_ch, head.dtype)
    for c in convs[1:]:
        weights += c.weights
        if bias is not None and c.bias is not None:
            bias += c.bias
    return ConvSpec(
        head.in_ch,
        head.out_ch,
        head.kernel,
        head.stride,
        head.dilation,
        head.padding,
        head.groups,
        weights,
        bias,
    )


def merge_rep_block(block: RepBlockSpec) -> ConvSpec:
    """Collapse a multi-branch block into one KxK conv; caches it on the block.

    Branch order is fixed (large, small, identity) so the summed weights are
    bit-reproducible.
    """
    lc = block.large.conv
    branches = [fold_bn(lc, block.large.bn)]
    if block.small is not None:
        branches.append(embed_kernel(fold_bn(block.small.conv, block.small.bn), block.kernel_size))
    if block.identity is not None:
        ident = identity_as_conv(lc.in_ch, lc.groups, block.kernel_size, dtype=lc.dtype)
        branches.append(fold_bn(ident, block.identity))
    merged = merge_parallel(branches)
    block.merged = merged
    return merged


def rep_block_forward(block: RepBlockSpec, x: Tensor4, conv=conv2d_naive) -> Tensor4:
    """Multi-branch (training-form) forward: sum of branch outputs."""
    out = batchnorm_infer(conv(x, block.large.conv), block.large.bn)
    if block.small is not None:
        out = Tensor4(out.data + batchnorm_infer(conv(x, block.small.conv), block.small.bn).data)
    if block.identity is not None:
        out = Tensor4(out.data + batchnorm_infer(x, block.identity).data)
    return out


def equivalence_check(
    block: RepBlockSpec, trials: int, tol: float, seed: int, spatial: int | None = None
) -> EquivalenceReport:
    """Compare branch-form and merged-form forwards on seeded random inputs.

    Both forms run through conv2d_naive. With trials == 0 the report is
    vacuously passing and records the zero trial count.
    """
    if block.merged is None:
        raise StateError("block has no merged form; run merge_rep_block first")
    if spatial is None:
        spatial = max(16, block.kernel_size + 3)
    rng = SplitMix64(seed)
    max_abs = 0.0
    max_rel = 0.0
    for _ in range(trials):
        data = rng.uniform(block.in_ch * spatial * spatial, -1.0, 1.0)
        x = Tensor4(data.reshape(1, block.in_ch, spatial, spatial).astype(block.dtype))
        branch = rep_block_forward(block, x).data
        merged = conv2d_naive(x, block.merged).data
        diff = float(np.max(np.abs(branch - merged)))
        max_abs = max(max_abs, diff)
        scale = float(np.max(np.abs(branch)))
        if scale > 0:
            max_rel = max(max_rel, diff / scale)
    return EquivalenceReport(trials, max_abs, max_rel, tol, max_abs <= tol)
