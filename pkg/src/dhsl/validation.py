"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import IMAGE_H, IMAGE_W
from .errors import ShapeError


def check_image_batch(X, name="X"):
    """Coerce to a finite float32 (n, 128, 48, 3) image stack."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1:] != (IMAGE_H, IMAGE_W, 3):
        raise ShapeError(
            f"{name} must have shape (n, {IMAGE_H}, {IMAGE_W}, 3), "
            f"got {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_pair_batch(pairs):
    """Coerce to (n, 2, 128, 48, 3) image pairs; returns the two halves."""
    pairs = np.asarray(pairs, dtype=np.float32)
    if pairs.ndim != 5 or pairs.shape[1] != 2:
        raise ShapeError(
            f"pairs must have shape (n, 2, {IMAGE_H}, {IMAGE_W}, 3), "
            f"got {pairs.shape}"
        )
    return (check_image_batch(pairs[:, 0], "pairs[:, 0]"),
            check_image_batch(pairs[:, 1], "pairs[:, 1]"))


def check_identity_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.asarray(y, dtype=np.int64)
        if not np.array_equal(rounded, y):
            raise ValueError(f"{name} must hold integer identity labels")
        y = rounded
    return y.astype(np.int64)
