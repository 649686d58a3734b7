"""Point annotations to density-map ground truth.

Each annotated head location deposits an isotropic Gaussian density
(1 / (2 pi sigma^2)) * exp(-d^2 / (2 sigma^2)), sampled at pixel centers
(pixel (r, c) has center (c + 0.5, r + 0.5)) and truncated at a fixed radius
in sigmas. With renormalization on, every deposit is rescaled to sum to one
after truncation and border clipping, so the map total equals the point
count up to float64 rounding; without it the raw samples are kept and
clipped mass is lost. Bandwidth is either fixed or geometry-adaptive (mean
distance to the k nearest neighbors, scaled by beta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, NumericError, ShapeError, ValidationError
from .tensor import Tensor4, sum_pool

_MIN_SIGMA = 1e-9


@dataclass(frozen=True)
class PointAnnotations:
    """Head locations in pixel coordinates: 0 <= x < width, 0 <= y < height."""

    width: int
    height: int
    points: np.ndarray  # (n, 2) float64, columns (x, y)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image size {self.width}x{self.height} must be positive")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValidationError("annotation points must be finite")
        for i, (x, y) in enumerate(pts):
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValidationError(
                    f"point {i} at ({x}, {y}) outside {self.width}x{self.height} image"
                )

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DensityMap:
    """Non-negative (h, w) grid whose sum estimates the person count."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ShapeError(f"density map must be 2-D, got ndim={vals.ndim}")
        if vals.dtype.type not in (np.float32, np.float64):
            raise ShapeError(f"density map dtype must be float32/float64, got {vals.dtype}")
        if not np.all(np.isfinite(vals)):
            raise NumericError("density map contains non-finite values")
        if vals.size and float(vals.min()) < 0:
            raise NumericError("density map contains negative values")
        object.__setattr__(self, "values", np.ascontiguousarray(vals))

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    def count(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class GaussianConfig:
    mode: str = "fixed"  # "fixed" | "adaptive"
    sigma: float = 4.0
    truncation: float = 4.0  # radius in sigmas
    k_nn: int = 3
    beta: float = 0.3
    renormalize: bool = True

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValidationError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.truncation < 1:
            raise ValidationError(f"truncation must be at least 1 sigma, got {self.truncation}")
        if self.k_nn < 1:
            raise ValidationError(f"k_nn must be positive, got {self.k_nn}")
        if self.beta <= 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")


def adaptive_sigmas(
    ann: PointAnnotations, k_nn: int, beta: float, fallback_sigma: float = 4.0
) -> np.ndarray:
    """Per-point sigma = beta * mean distance to the k nearest neighbors.

    k is truncated to the number of other points; with fewer than two points
    the fixed fallback sigma is used.
    """
    n = len(ann)
    if n < 2:
        return np.full(n, fallback_sigma, dtype=np.float64)
    pts = ann.points
    delta = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((delta**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    k = min(k_nn, n - 1)
    nearest = np.partition(dist, k - 1, axis=1)[:, :k]
    sigmas = beta * nearest.mean(axis=1)
    return np.maximum(sigmas, _MIN_SIGMA)


def _deposit(values: np.ndarray, x: float, y: float, sigma: float, cfg: GaussianConfig) -> None:
    h, w = values.shape
    radius = cfg.truncation * sigma
    r0 = max(0, math.ceil(y - radius - 0.5))
    r1 = min(h - 1, math.floor(y + radius - 0.5))
    c0 = max(0, math.ceil(x - radius - 0.5))
    c1 = min(w - 1, math.floor(x + radius - 0.5))
    patch = None
    if r0 <= r1 and c0 <= c1:
        dy = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5 - y
        dx = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5 - x
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        norm = 1.0 / (2.0 * math.pi * sigma * sigma)
        patch = np.where(
            d2 <= radius * radius, norm * np.exp(-d2 / (2.0 * sigma * sigma)), 0.0
        )
        total = patch.sum()
        if total <= 0:
            patch = None
    if patch is None:
        # degenerate window (tiny sigma or underflow): all mass on nearest pixel
        r = min(h - 1, max(0, int(y)))
        c = min(w - 1, max(0, int(x)))
        values[r, c] += 1.0 if cfg.renormalize else 0.0
        return
    if cfg.renormalize:
        patch = patch / total
    values[r0 : r1 + 1, c0 : c1 + 1] += patch


def generate_density(ann: PointAnnotations, cfg: GaussianConfig) -> DensityMap:
    """Accumulate one truncated Gaussian per annotated point."""
    values = np.zeros((ann.height, ann.width), dtype=np.float64)
    n = len(ann)
    if n == 0:
        return DensityMap(values)
    if cfg.mode == "adaptive":
        sigmas = adaptive_sigmas(ann, cfg.k_nn, cfg.beta, fallback_sigma=cfg.sigma)
    else:
        sigmas = np.full(n, cfg.sigma, dtype=np.float64)
    for (x, y), sigma in zip(ann.points, sigmas):
        _deposit(values, float(x), float(y), float(sigma), cfg)
    return DensityMap(values)


def align_to_output(dm: DensityMap, stride: int) -> DensityMap:
    """Sum-pool a density map down to the prediction grid; mass is preserved."""
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    if stride == 1:
        return dm
    if dm.h % stride or dm.w % stride:
        raise GeometryError(f"map {dm.h}x{dm.w} not divisible by stride {stride}")
    pooled = sum_pool(Tensor4(dm.values[None, None]), stride)
    return DensityMap(pooled.data[0, 0])
