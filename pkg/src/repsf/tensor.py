"""Minimal deterministic 4-D tensor engine.

Everything operates on dense (batch, channel, height, width) arrays in
float32 or float64. All operations are pure functions over immutable values
and are bit-reproducible: convolution accumulates each output element in a
fixed order (input channel, then kernel row, then kernel column), and the
GEMM path pins BLAS to a single thread because multi-threaded GEMM is not
guaranteed to produce identical bits for every thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import GeometryError, NumericError, ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)

# im2col buffers are chunked to stay below this many bytes.
_IM2COL_BUDGET = 1 << 26


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt.type not in SUPPORTED_DTYPES:
        raise ShapeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


@dataclass(frozen=True)
class Tensor4:
    """Dense (n, c, h, w) array, row-major, float32 or float64."""

    data: np.ndarray

    def __post_init__(self):
        if not isinstance(self.data, np.ndarray) or self.data.ndim != 4:
            raise ShapeError("Tensor4 requires a 4-D numpy array")
        _check_dtype(self.data.dtype)
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor4":
        dt = _check_dtype(dtype)
        return Tensor4(self.data.astype(dt, copy=False))

    @classmethod
    def zeros(cls, shape: tuple[int, int, int, int], dtype=np.float32) -> "Tensor4":
        return cls(np.zeros(shape, dtype=_check_dtype(dtype)))

    @classmethod
    def from_array(cls, array, dtype=None, check_finite: bool = True) -> "Tensor4":
        """Validating constructor for externally produced data."""
        arr = np.asarray(array, dtype=None if dtype is None else _check_dtype(dtype))
        if arr.ndim != 4:
            raise ShapeError(f"expected 4-D data, got ndim={arr.ndim}")
        if arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        if check_finite and not np.all(np.isfinite(arr)):
            raise NumericError("Tensor4 data contains non-finite values")
        return cls(np.ascontiguousarray(arr))


def _pair(value, name: str) -> tuple[int, int]:
    if isinstance(value, int):
        value = (value, value)
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ShapeError(f"{name} must be an int or a pair")
    return pair


@dataclass(frozen=True)
class ConvSpec:
    """2-D convolution parameters (cross-correlation, no kernel flip).

    weights has shape (out_ch, in_ch // groups, kh, kw); bias, when present,
    is one value per output channel. Odd kernels are assumed by the
    reparameterization algebra but not enforced here (the stem is 4x4).
    """

    in_ch: int
    out_ch: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    weights: np.ndarray = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _pair(self.stride, "stride"))
        object.__setattr__(self, "dilation", _pair(self.dilation, "dilation"))
        object.__setattr__(self, "padding", _pair(self.padding, "padding"))
        if min(self.in_ch, self.out_ch, self.groups) < 1:
            raise ShapeError("in_ch, out_ch and groups must be positive")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ShapeError("kernel, stride and dilation must be positive")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")
        if self.weights is None:
            raise ShapeError("ConvSpec requires a weight array")
        expected = (self.out_ch, self.in_ch // self.groups, *self.kernel)
        if self.weights.shape != expected:
            raise ShapeError(f"weights shape {self.weights.shape} != expected {expected}")
        _check_dtype(self.weights.dtype)
        if self.bias is not None:
            if self.bias.shape != (self.out_ch,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_ch},)")
            if self.bias.dtype != self.weights.dtype:
                raise ShapeError("bias dtype must match weights dtype")

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype

    def astype(self, dtype) -> "ConvSpec":
        dt = _check_dtype(dtype)
        return ConvSpec(
            self.in_ch,
            self.out_ch,
            self.kernel,
            self.stride,
            self.dilation,
            self.padding,
            self.groups,
            self.weights.astype(dt, copy=False),
            None if self.bias is None else self.bias.astype(dt, copy=False),
        )

    def param_count(self) -> int:
        return int(self.weights.size + (0 if self.bias is None else self.bias.size))


@dataclass(frozen=True)
class BatchNormSpec:
    """Inference-mode batch norm: y = gamma * (x - mean) / sqrt(var + eps) + beta."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        vecs = (self.gamma, self.beta, self.mean, self.var)
        if any(v.ndim != 1 for v in vecs):
            raise ShapeError("batch norm parameters must be 1-D vectors")
        if len({v.shape[0] for v in vecs}) != 1:
            raise ShapeError("batch norm parameter vectors must share one length")
        if len({v.dtype for v in vecs}) != 1:
            raise ShapeError("batch norm parameter vectors must share one dtype")
        _check_dtype(self.gamma.dtype)
        if self.eps <= 0:
            raise NumericError(f"batch norm eps must be positive, got {self.eps}")
        if np.any(self.var < 0):
            raise NumericError("batch norm variance must be non-negative")

    @property
    def num_features(self) -> int:
        return self.gamma.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.gamma.dtype

    def astype(self, dtype) -> "BatchNormSpec":
        dt = _check_dtype(dtype)
        return BatchNormSpec(
            self.gamma.astype(dt, copy=False),
            self.beta.astype(dt, copy=False),
            self.mean.astype(dt, copy=False),
            self.var.astype(dt, copy=False),
            self.eps,
        )

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, eps: float = 1e-12) -> "BatchNormSpec":
        """Exact identity map: var is chosen so that var + eps == 1."""
        dt = _check_dtype(dtype)
        return cls(
            np.ones(channels, dtype=dt),
            np.zeros(channels, dtype=dt),
            np.zeros(channels, dtype=dt),
            np.full(channels, dt.type(1.0) - dt.type(eps), dtype=dt),
            eps,
        )

    def param_count(self) -> int:
        # learnable affine only; running statistics are buffers
        return int(self.gamma.size + self.beta.size)


def conv_output_hw(
    kernel: tuple[int, int],
    stride: tuple[int, int],
    dilation: tuple[int, int],
    padding: tuple[int, int],
    h: int,
    w: int,
) -> tuple[int, int]:
    """Output spatial dims: floor((s + 2p - d*(k-1) - 1)/stride) + 1 per axis."""
    if h < 1 or w < 1:
        raise GeometryError(f"input size {h}x{w} must be positive")
    out = []
    for size, k, s, d, p in zip((h, w), kernel, stride, dilation, padding):
        span = size + 2 * p - d * (k - 1) - 1
        o = span // s + 1
        if span < 0 or o < 1:
            raise GeometryError(
                f"kernel {kernel} stride {stride} dilation {dilation} padding {padding} "
                f"yields empty output on {h}x{w} input"
            )
        out.append(o)
    return out[0], out[1]


def output_shape(spec: ConvSpec, h: int, w: int) -> tuple[int, int]:
    return conv_output_hw(spec.kernel, spec.stride, spec.dilation, spec.padding, h, w)


def _conv_checks(x: Tensor4, spec: ConvSpec) -> tuple[int, int]:
    if x.c != spec.in_ch:
        raise ShapeError(f"input has {x.c} channels, spec expects {spec.in_ch}")
    if x.dtype != spec.dtype:
        raise ShapeError(f"input dtype {x.dtype} != spec dtype {spec.dtype}")
    return output_shape(spec, x.h, x.w)


def _padded(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_naive(x: Tensor4, spec: ConvSpec) -> Tensor4:
    """Reference convolution with a pinned per-element accumulation order.

    Each output element is accumulated as
        sum over (local input channel, kernel row, kernel col), in that order,
    then the bias is added. The loop below is vectorized over output
    positions, which performs the identical sequence of IEEE additions per
    element, so results are bit-identical to a scalar six-loop evaluation.
    """
    oh, ow = _conv_checks(x, spec)
    n = x.n
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    cin_g = spec.in_ch // spec.groups
    cout_g = spec.out_ch // spec.groups

    xp = _padded(x.data, spec.padding)
    out = np.zeros((n, spec.out_ch, oh, ow), dtype=x.dtype)
    h_span = (oh - 1) * sh + 1
    w_span = (ow - 1) * sw + 1
    for g in range(spec.groups):
        osl = slice(g * cout_g, (g + 1) * cout_g)
        wg = spec.weights[osl]
        for ci in range(cin_g):
            plane = xp[:, g * cin_g + ci]
            for i in range(kh):
                for j in range(kw):
                    tap = plane[
                        :,
                        i * dh : i * dh + h_span : sh,
                        j * dw : j * dw + w_span : sw,
                    ]
                    out[:, osl] += tap[:, None] * wg[None, :, ci, i, j, None, None]
    if spec.bias is not None:
        out += spec.bias[None, :, None, None]
    return Tensor4(out)


def _strided_taps(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Zero-copy (n, c, kh, kw, oh, ow) view of every kernel tap."""
    n, c = xp.shape[:2]
    kh, kw = spec.kernel
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(
            sn,
            sc,
            sh * spec.dilation[0],
            sw * spec.dilation[1],
            sh * spec.stride[0],
            sw * spec.stride[1],
        ),
        writeable=False,
    )


def _conv_single_in_channel(x: Tensor4, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Tap-accumulation convolution for in_ch/groups == 1 (depthwise family).

    im2col buys nothing when each output channel reads one input plane, so
    accumulate the kh*kw taps directly; the order matches conv2d_naive.
    """
    n = x.n
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    cout_g = spec.out_ch // spec.groups
    xp = _padded(x.data, spec.padding)
    if cout_g != 1:
        xp = xp[:, np.repeat(np.arange(spec.groups), cout_g)]
    w = spec.weights[:, 0]  # (out_ch, kh, kw)
    out = np.zeros((n, spec.out_ch, oh, ow), dtype=x.dtype)
    h_span = (oh - 1) * sh + 1
    w_span = (ow - 1) * sw + 1
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i * dh : i * dh + h_span : sh, j * dw : j * dw + w_span : sw]
            out += tap * w[None, :, i, j, None, None]
    return out


def conv2d_gemm(x: Tensor4, spec: ConvSpec) -> Tensor4:
    """im2col + matrix-multiply convolution (the performance path).

    Numerically equivalent to conv2d_naive up to summation-order roundoff.
    BLAS is limited to one thread for bit-reproducibility; im2col buffers
    are chunked (over output rows, or over groups) to bound memory, and
    depthwise-style convolutions skip the lowering entirely.
    """
    oh, ow = _conv_checks(x, spec)
    n = x.n
    kh, kw = spec.kernel
    cin_g = spec.in_ch // spec.groups
    cout_g = spec.out_ch // spec.groups

    if cin_g == 1:
        out = _conv_single_in_channel(x, spec, oh, ow)
        if spec.bias is not None:
            out += spec.bias[None, :, None, None]
        return Tensor4(out)

    xp = _padded(x.data, spec.padding)
    taps = _strided_taps(xp, spec, oh, ow)

    with threadpool_limits(limits=1, user_api="blas"):
        if spec.groups == 1:
            wmat = spec.weights.reshape(spec.out_ch, -1).T
            row_bytes = n * ow * spec.in_ch * kh * kw * x.dtype.itemsize
            rows = max(1, min(oh, _IM2COL_BUDGET // max(row_bytes, 1)))
            out = np.empty((n, spec.out_ch, oh, ow), dtype=x.dtype)
            for r0 in range(0, oh, rows):
                r1 = min(r0 + rows, oh)
                cols = taps[:, :, :, :, r0:r1, :].transpose(0, 4, 5, 1, 2, 3).reshape(
                    n * (r1 - r0) * ow, spec.in_ch * kh * kw
                )
                flat = cols @ wmat
                out[:, :, r0:r1, :] = flat.reshape(n, r1 - r0, ow, spec.out_ch).transpose(
                    0, 3, 1, 2
                )
        else:
            out = np.empty((n, spec.out_ch, oh, ow), dtype=x.dtype)
            per_group = n * oh * ow * cin_g * kh * kw * x.dtype.itemsize
            chunk = max(1, min(spec.groups, _IM2COL_BUDGET // max(per_group, 1)))
            wmat = spec.weights.reshape(spec.groups, cout_g, cin_g * kh * kw)
            grouped = taps.reshape(n, spec.groups, cin_g, kh, kw, oh, ow)
            for g0 in range(0, spec.groups, chunk):
                g1 = min(g0 + chunk, spec.groups)
                cols = grouped[:, g0:g1].transpose(1, 2, 3, 4, 0, 5, 6).reshape(
                    g1 - g0, cin_g * kh * kw, n * oh * ow
                )
                prod = wmat[g0:g1] @ cols  # (chunk, cout_g, n*oh*ow)
                prod = prod.reshape(g1 - g0, cout_g, n, oh, ow)
                out[:, g0 * cout_g : g1 * cout_g] = prod.transpose(2, 0, 1, 3, 4).reshape(
                    n, (g1 - g0) * cout_g, oh, ow
                )
    out = np.ascontiguousarray(out)
    if spec.bias is not None:
        out += spec.bias[None, :, None, None]
    return Tensor4(out)


def conv2d(x: Tensor4, spec: ConvSpec, method: str = "gemm") -> Tensor4:
    if method == "gemm":
        return conv2d_gemm(x, spec)
    if method == "naive":
        return conv2d_naive(x, spec)
    raise ShapeError(f"unknown convolution method {method!r}")


def batchnorm_infer(x: Tensor4, bn: BatchNormSpec) -> Tensor4:
    if x.c != bn.num_features:
        raise ShapeError(f"input has {x.c} channels, batch norm has {bn.num_features}")
    if x.dtype != bn.dtype:
        raise ShapeError(f"input dtype {x.dtype} != batch norm dtype {bn.dtype}")
    shaped = lambda v: v[None, :, None, None]
    y = shaped(bn.gamma) * (x.data - shaped(bn.mean)) / np.sqrt(
        shaped(bn.var) + x.dtype.type(bn.eps)
    ) + shaped(bn.beta)
    return Tensor4(y)


def relu(x: Tensor4) -> Tensor4:
    return Tensor4(np.maximum(x.data, x.dtype.type(0)))


def global_avg_pool(x: Tensor4) -> Tensor4:
    return Tensor4(x.data.mean(axis=(2, 3), keepdims=True))


def adaptive_avg_pool(x: Tensor4, out_hw: tuple[int, int]) -> Tensor4:
    """Average pooling to an (oh, ow) grid over floor/ceil cell boundaries."""
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise GeometryError(f"pool target {out_hw} must be positive")
    out = np.empty((x.n, x.c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        r0, r1 = (i * x.h) // oh, -((-(i + 1) * x.h) // oh)
        for j in range(ow):
            c0, c1 = (j * x.w) // ow, -((-(j + 1) * x.w) // ow)
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return Tensor4(out)


def _lerp_axis_coords(size_in: int, size_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size_in - 1)
    return i0, i1, src - i0


def bilinear_upsample(x: Tensor4, out_hw: tuple[int, int]) -> Tensor4:
    """Bilinear resampling with half-pixel centers (align_corners=false).

    The interpolation uses the monotone form a + t*(b - a) so constant
    inputs are reproduced exactly.
    """
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise GeometryError(f"upsample target {out_hw} must be positive")
    y0, y1, ty = _lerp_axis_coords(x.h, oh)
    x0, x1, tx = _lerp_axis_coords(x.w, ow)
    ty = ty.astype(x.dtype)[None, None, :, None]
    tx = tx.astype(x.dtype)[None, None, None, :]
    top = x.data[:, :, y0, :]
    bot = x.data[:, :, y1, :]
    rows = top + ty * (bot - top)
    left = rows[:, :, :, x0]
    right = rows[:, :, :, x1]
    return Tensor4(left + tx * (right - left))


def concat_channels(parts: Sequence[Tensor4]) -> Tensor4:
    if not parts:
        raise ShapeError("concat_channels requires at least one tensor")
    head = parts[0]
    for p in parts[1:]:
        if (p.n, p.h, p.w) != (head.n, head.h, head.w):
            raise ShapeError(
                f"concat parts disagree on (n, h, w): {(p.n, p.h, p.w)} vs {(head.n, head.h, head.w)}"
            )
        if p.dtype != head.dtype:
            raise ShapeError("concat parts must share one dtype")
    return Tensor4(np.concatenate([p.data for p in parts], axis=1))


def sum_pool(x: Tensor4, factor: int) -> Tensor4:
    """Sum over non-overlapping factor x factor blocks (mass preserving)."""
    if factor < 1:
        raise ShapeError(f"pool factor must be positive, got {factor}")
    if x.h % factor or x.w % factor:
        raise ShapeError(f"spatial dims {x.h}x{x.w} not divisible by factor {factor}")
    blocks = x.data.reshape(x.n, x.c, x.h // factor, factor, x.w // factor, factor)
    return Tensor4(blocks.sum(axis=(3, 5)))
