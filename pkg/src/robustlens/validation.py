"""Input checks shared by the estimators, generators and attacks."""

from __future__ import annotations

import numpy as np

RANGE_SLACK = 1e-9


def _check(array, ndim: int, what: str, check_range: bool) -> np.ndarray:
    x = np.asarray(array, dtype=np.float64)
    if x.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    if check_range and x.size and (x.min() < -1 - RANGE_SLACK or x.max() > 1 + RANGE_SLACK):
        raise ValueError(f"{what} values must lie in [-1, 1], got [{x.min():.4g}, {x.max():.4g}]")
    return x


def check_image(image, check_range: bool = True) -> np.ndarray:
    """A finite (C, H, W) float64 image, by default required to lie in [-1, 1]."""
    return _check(image, 3, "image", check_range)


def check_images(images, check_range: bool = True) -> np.ndarray:
    """A finite (N, C, H, W) float64 batch."""
    return _check(images, 4, "images", check_range)


def as_batch(images, check_range: bool = False) -> tuple[np.ndarray, bool]:
    """Promote a single (C, H, W) image to a batch; report whether it was promoted."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        return check_images(x[None], check_range), True
    return check_images(x, check_range), False


def check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {num_classes} classes")
    return y
