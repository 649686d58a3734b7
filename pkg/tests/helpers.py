"""Shared test utilities: independent oracles and randomized spec builders.

The oracles here are deliberately written as plain loops over the defining
formulas, independent of the library's vectorized implementations.
"""

from __future__ import annotations

import math

import numpy as np

from repsf.density import PointAnnotations
from repsf.reparam import ConvBN, RepBlockSpec
from repsf.tensor import BatchNormSpec, ConvSpec, output_shape


# ---------------------------------------------------------------------------
# oracles

def conv2d_loop(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Six-nested-loop cross-correlation; accumulates (ci, kh, kw) then bias."""
    n, _, h, w = x.shape
    oh, ow = output_shape(spec, h, w)
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    cin_g = spec.in_ch // spec.groups
    cout_g = spec.out_ch // spec.groups
    out = np.zeros((n, spec.out_ch, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(spec.out_ch):
            g = o // cout_g
            for oy in range(oh):
                for ox in range(ow):
                    acc = x.dtype.type(0.0)
                    for ci in range(cin_g):
                        for i in range(kh):
                            for j in range(kw):
                                iy = oy * sh - ph + i * dh
                                ix = ox * sw - pw + j * dw
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += x[b, g * cin_g + ci, iy, ix] * spec.weights[o, ci, i, j]
                    if spec.bias is not None:
                        acc += spec.bias[o]
                    out[b, o, oy, ox] = acc
    return out


def batchnorm_loop(x: np.ndarray, bn: BatchNormSpec) -> np.ndarray:
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            for i in range(x.shape[2]):
                for j in range(x.shape[3]):
                    out[b, c, i, j] = (
                        bn.gamma[c] * (x[b, c, i, j] - bn.mean[c])
                        / math.sqrt(bn.var[c] + bn.eps) + bn.beta[c]
                    )
    return out


def gaussian_density_loop(
    ann: PointAnnotations, sigmas, truncation: float, renormalize: bool = True
) -> np.ndarray:
    """Per-point, per-pixel accumulation of truncated pixel-center Gaussians.

    Loops only over each point's truncation window; pixels outside it have
    contribution zero by definition.
    """
    h, w = ann.height, ann.width
    out = np.zeros((h, w), dtype=np.float64)
    for (x, y), sigma in zip(ann.points, sigmas):
        radius = truncation * sigma
        r_lo = max(0, math.ceil(y - radius - 0.5))
        r_hi = min(h - 1, math.floor(y + radius - 0.5))
        c_lo = max(0, math.ceil(x - radius - 0.5))
        c_hi = min(w - 1, math.floor(x + radius - 0.5))
        contrib = {}
        total = 0.0
        norm = 1.0 / (2.0 * math.pi * sigma * sigma)
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                d2 = (c + 0.5 - x) ** 2 + (r + 0.5 - y) ** 2
                if d2 <= radius * radius:
                    val = norm * math.exp(-d2 / (2.0 * sigma * sigma))
                    contrib[(r, c)] = val
                    total += val
        if total <= 0.0:
            r = min(h - 1, max(0, int(y)))
            c = min(w - 1, max(0, int(x)))
            if renormalize:
                out[r, c] += 1.0
            continue
        for (r, c), val in contrib.items():
            out[r, c] += (val / total) if renormalize else val
    return out


def knn_sigma_loop(points: np.ndarray, k: int, beta: float) -> list[float]:
    sigmas = []
    for i in range(len(points)):
        dists = sorted(
            math.dist(points[i], points[j]) for j in range(len(points)) if j != i
        )
        kk = min(k, len(dists))
        sigmas.append(beta * sum(dists[:kk]) / kk)
    return sigmas


# ---------------------------------------------------------------------------
# randomized spec builders

def rand_conv_spec(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    kernel: int,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    dtype=np.float64,
    bias: bool = True,
    same_padding: bool = True,
    padding: int | None = None,
) -> ConvSpec:
    if padding is None:
        padding = dilation * (kernel - 1) // 2 if same_padding else 0
    weights = rng.uniform(-1, 1, (out_ch, in_ch // groups, kernel, kernel)).astype(dtype)
    b = rng.uniform(-1, 1, out_ch).astype(dtype) if bias else None
    return ConvSpec(
        in_ch, out_ch, (kernel, kernel), (stride, stride), (dilation, dilation),
        (padding, padding), groups, weights, b,
    )


def rand_bn(rng: np.random.Generator, channels: int, dtype=np.float64) -> BatchNormSpec:
    return BatchNormSpec(
        gamma=rng.uniform(0.5, 2.0, channels).astype(dtype),
        beta=rng.uniform(-1.0, 1.0, channels).astype(dtype),
        mean=rng.uniform(-1.0, 1.0, channels).astype(dtype),
        var=rng.uniform(0.25, 2.0, channels).astype(dtype),
        eps=1e-5,
    )


def identity_bn(channels: int, dtype=np.float64, eps: float = 1e-12) -> BatchNormSpec:
    """Batch norm that is exactly the identity map (var chosen so var+eps == 1)."""
    return BatchNormSpec(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        mean=np.zeros(channels, dtype=dtype),
        var=np.full(channels, 1.0 - eps, dtype=dtype),
        eps=eps,
    )


def rand_rep_block(
    rng: np.random.Generator,
    channels: int,
    large_k: int,
    small_k: int | None = 3,
    groups: int = 1,
    stride: int = 1,
    identity: bool = True,
    dtype=np.float64,
) -> RepBlockSpec:
    large = ConvBN(
        rand_conv_spec(rng, channels, channels, large_k, stride=stride,
                       groups=groups, dtype=dtype, bias=False),
        rand_bn(rng, channels, dtype),
    )
    small = None
    if small_k is not None:
        small = ConvBN(
            rand_conv_spec(rng, channels, channels, small_k, stride=stride,
                           groups=groups, dtype=dtype, bias=False),
            rand_bn(rng, channels, dtype),
        )
    ident = rand_bn(rng, channels, dtype) if identity and stride == 1 else None
    return RepBlockSpec(large, small, ident)


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def scaled_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| relative to the larger output magnitude (guards near-zero)."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return max_abs_diff(a, b) / scale
