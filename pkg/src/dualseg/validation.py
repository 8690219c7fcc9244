"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def check_image_batch(X, channels: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float32 ``N x C x H x W`` array.

    A 3-D input is read as single-channel ``N x H x W``.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise ValueError(f"{name} must be a numeric array")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W) or (N, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {X.shape[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_mask_batch(y, n: int, spatial: Sequence[int], name: str = "y") -> np.ndarray:
    """Return ``y`` as a binary float32 ``N x 1 x H x W`` array matching ``n`` and ``spatial``."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise ValueError(f"{name} must have shape (N, H, W), got {y.shape}")
    if y.shape[0] != n:
        raise ValueError(f"{name} has {y.shape[0]} masks for {n} images")
    if tuple(y.shape[1:]) != tuple(spatial):
        raise ValueError(f"{name} dims {y.shape[1:]} differ from image dims {tuple(spatial)}")
    return (y > 0).astype(np.float32)[:, None]


def check_frames(X, name: str = "X") -> np.ndarray:
    """Stack of square 2-D grayscale frames, ``N x S x S``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"{name} must be a stack of square frames (N, S, S), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return X
