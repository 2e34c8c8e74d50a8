"""
fgvis — Tensor Core

Dense tensors are numpy ndarrays in row-major [C, H, W] order (images) and
[out, in, kh, kw] order (conv kernels). Engine math runs in float32; oracle
computations (finite differences, AUC checks) run in float64.

Rng wraps numpy's PCG64 bit generator. PCG64 streams are specified
bit-for-bit, so a seed reproduces the same draws on every platform.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .models import ShapeError

Tensor = NDArray[np.floating]

ENGINE_DTYPE = np.float32
ORACLE_DTYPE = np.float64


class ReduceKind(str, Enum):
    SUM = "sum"
    MAX_ABS = "max_abs"
    MAX = "max"
    MIN = "min"


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream. Single owner; do not share across workers."""

    def __init__(self, seed: int) -> None:
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def random(self, shape: Sequence[int], dtype=ENGINE_DTYPE) -> Tensor:
        return self._gen.random(tuple(shape), dtype=dtype)

    def normal(self, shape: Sequence[int], std: float = 1.0, dtype=ENGINE_DTYPE) -> Tensor:
        return (self._gen.standard_normal(tuple(shape), dtype=np.float64) * std).astype(dtype)

    def integers(self, high: int, size: int) -> NDArray[np.int64]:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> NDArray[np.int64]:
        """Sample `size` distinct indices from range(n)."""
        return self._gen.choice(n, size=size, replace=False)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        child_seed = np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0]
        return Rng(int(child_seed))


# ---------------------------------------------------------------------------
# Elementwise / reductions
# ---------------------------------------------------------------------------

def check_same_shape(a: Tensor, b: Tensor, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def map_zip(a: Tensor, b: Tensor, f: Callable[[Tensor, Tensor], Tensor]) -> Tensor:
    """Apply a vectorized binary function (e.g. np.add) to equally shaped tensors."""
    check_same_shape(a, b)
    return np.asarray(f(a, b), dtype=np.result_type(a, b))


def reduce(a: Tensor, kind: ReduceKind | str) -> float:
    if a.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    kind = ReduceKind(kind)
    if kind is ReduceKind.SUM:
        return float(np.sum(a, dtype=np.float64))
    if kind is ReduceKind.MAX_ABS:
        return float(np.max(np.abs(a)))
    if kind is ReduceKind.MAX:
        return float(np.max(a))
    return float(np.min(a))


def clamp01(a: Tensor) -> Tensor:
    return np.clip(a, 0.0, 1.0).astype(a.dtype, copy=False)


def all_finite(a: Tensor) -> bool:
    return bool(np.isfinite(a).all())


# ---------------------------------------------------------------------------
# Image processing
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> NDArray[np.float64]:
    """Normalized 1-D Gaussian of radius ceil(3 * sigma)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: Tensor, sigma: float) -> Tensor:
    """Per-channel separable Gaussian blur of a [C, H, W] image, clamp-to-edge borders."""
    if img.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] image, got shape {img.shape}")
    kernel = gaussian_kernel(sigma)
    out = img.astype(np.float64)
    out = ndimage.correlate1d(out, kernel, axis=1, mode="nearest")
    out = ndimage.correlate1d(out, kernel, axis=2, mode="nearest")
    return out.astype(img.dtype)


def uniform_noise(
    shape: Sequence[int], lo: float, hi: float, rng: Rng, dtype=ENGINE_DTYPE
) -> Tensor:
    """i.i.d. U[lo, hi) samples."""
    if not lo < hi:
        raise ValueError(f"uniform_noise requires lo < hi, got [{lo}, {hi})")
    lo_c, hi_c = dtype(lo), dtype(hi)
    sample = lo_c + (hi_c - lo_c) * rng.random(shape, dtype=dtype)
    # float rounding of lo + (hi - lo) * u can land on hi
    return np.minimum(sample, np.nextafter(hi_c, lo_c)).astype(dtype, copy=False)
