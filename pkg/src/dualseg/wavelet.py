"""Separable 2-D Daubechies-2 (4-tap) wavelet transform with periodic extension.

The 1-D analysis step is ``y[n] = sum_k f[k] x[(2n + 1 - k) mod N]``
(convolve, keep odd samples).  Odd lengths are first extended by repeating
the last sample.  The vertical-detail subband is lowpass down the rows and
highpass across the columns, so it responds to vertical edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .imaging import resize_bilinear

DETAIL_SIZE = 64


@dataclass(frozen=True)
class WaveletFilters:
    lowpass: np.ndarray
    highpass: np.ndarray


@dataclass
class SubbandSet:
    ll: np.ndarray
    horizontal: np.ndarray
    vertical: np.ndarray
    diagonal: np.ndarray
    level: int = 1
    shape: Tuple[int, int] = (0, 0)


def db2_filters() -> WaveletFilters:
    s3 = np.sqrt(3.0)
    h = np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4 * np.sqrt(2.0))
    g = np.array([(-1) ** k * h[3 - k] for k in range(4)])
    return WaveletFilters(h, g)


def _even(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] % 2 == 0:
        return x
    last = np.take(x, [-1], axis=axis)
    return np.concatenate([x, last], axis=axis)


def _analyze(x: np.ndarray, f: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(_even(x, axis), axis, -1)
    n = x.shape[-1]
    base = 2 * np.arange(n // 2) + 1
    y = np.zeros(x.shape[:-1] + (n // 2,))
    for k, fk in enumerate(f):
        y += fk * x[..., (base - k) % n]
    return np.moveaxis(y, -1, axis)


def _synthesize(y: np.ndarray, f: np.ndarray, axis: int) -> np.ndarray:
    # adjoint of _analyze (its inverse for an orthonormal bank)
    y = np.moveaxis(y, axis, -1)
    n = 2 * y.shape[-1]
    base = 2 * np.arange(n // 2) + 1
    x = np.zeros(y.shape[:-1] + (n,))
    for k, fk in enumerate(f):
        x[..., (base - k) % n] += fk * y
    return np.moveaxis(x, -1, axis)


def dwt2(img: np.ndarray, filters: WaveletFilters = None) -> SubbandSet:
    """One level of the separable 2-D transform."""
    filters = filters or db2_filters()
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("dwt2 expects a 2-D plane")
    if min(x.shape) < len(filters.lowpass):
        raise ValueError(f"image {x.shape} smaller than the filter support")
    h, g = filters.lowpass, filters.highpass
    lo_cols = _analyze(x, h, axis=1)
    hi_cols = _analyze(x, g, axis=1)
    return SubbandSet(
        ll=_analyze(lo_cols, h, axis=0),
        horizontal=_analyze(lo_cols, g, axis=0),
        vertical=_analyze(hi_cols, h, axis=0),
        diagonal=_analyze(hi_cols, g, axis=0),
        shape=x.shape,
    )


def idwt2(bands: SubbandSet, filters: WaveletFilters = None) -> np.ndarray:
    filters = filters or db2_filters()
    planes = (bands.ll, bands.horizontal, bands.vertical, bands.diagonal)
    if any(p.shape != bands.ll.shape for p in planes):
        raise ValueError("subband planes must share one shape")
    h, g = filters.lowpass, filters.highpass
    lo_cols = _synthesize(bands.ll, h, 0) + _synthesize(bands.horizontal, g, 0)
    hi_cols = _synthesize(bands.vertical, h, 0) + _synthesize(bands.diagonal, g, 0)
    x = _synthesize(lo_cols, h, 1) + _synthesize(hi_cols, g, 1)
    rows, cols = bands.shape if bands.shape != (0, 0) else x.shape
    return x[:rows, :cols]


def vertical_details(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vertical-detail planes of decomposition levels 1 and 2."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 8:
        raise ValueError(f"vertical_details needs an image of at least 8x8, got {x.shape}")
    level1 = dwt2(x)
    level2 = dwt2(level1.ll)
    return level1.vertical, level2.vertical


def detail_to_channel(detail: np.ndarray, size: int = DETAIL_SIZE) -> np.ndarray:
    """Bilinear resize to ``size x size`` then min-max scale to [0, 1] (constant -> zeros)."""
    plane = resize_bilinear(np.asarray(detail, dtype=np.float64), size, size)
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros((size, size))
    return (plane - lo) / (hi - lo)
