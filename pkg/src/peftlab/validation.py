"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_image_array(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(
            f"{name} must be a 4-d array (n_samples, height, width, channels), "
            f"got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has zero samples")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_segmentation_labels(y, X: np.ndarray, num_classes: int | None = None,
                              name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape[:3]:
        raise ValueError(
            f"{name} must have shape (n_samples, height, width) = {X.shape[:3]}, "
            f"got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError(f"{name} must contain integer class ids")
        y = y.astype(np.int64)
    else:
        y = y.astype(np.int64, copy=False)
    if y.min() < 0:
        raise ValueError(f"{name} contains negative class ids")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(
            f"{name} contains class id {y.max()} but the model predicts "
            f"{num_classes} classes")
    return y


def check_depth_labels(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.shape != X.shape[:3]:
        raise ValueError(
            f"{name} must have shape (n_samples, height, width) = {X.shape[:3]}, "
            f"got {y.shape}")
    if not np.isfinite(y).all():
        raise ValueError(f"{name} contains non-finite values")
    return y


def train_val_split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint shuffle-split; keeps at least one sample per side."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if n < 2:
        raise ValueError("need at least 2 samples to split train/val")
    order = np.random.default_rng([seed, 0x5911]).permutation(n)
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    return order[n_val:], order[:n_val]
