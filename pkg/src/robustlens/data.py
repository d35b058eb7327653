"""Labelled image collections in the (N, C, H, W), [-1, 1] layout used throughout."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    """Images with integer labels and optional foreground masks.

    ``backgrounds`` holds the foreground-free render of each image when the
    generator knows it; the background-swap experiments draw from it.
    """

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    backgrounds: np.ndarray | None = None
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if self.masks is not None:
            masks = np.asarray(self.masks, dtype=np.float64)
            if masks.shape != (images.shape[0],) + images.shape[2:]:
                raise ValueError(f"masks shape {masks.shape} does not match images {images.shape}")
            object.__setattr__(self, "masks", masks)
        if self.backgrounds is not None:
            bgs = np.asarray(self.backgrounds, dtype=np.float64)
            if bgs.shape != images.shape:
                raise ValueError("backgrounds must match images in shape")
            object.__setattr__(self, "backgrounds", bgs)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> LabeledDataset:
        index = np.asarray(index)
        return LabeledDataset(
            self.images[index],
            self.labels[index],
            None if self.masks is None else self.masks[index],
            None if self.backgrounds is None else self.backgrounds[index],
            tuple(self.names[i] for i in np.arange(len(self))[index]) if self.names else (),
        )

    def with_images(self, images) -> LabeledDataset:
        return LabeledDataset(images, self.labels, self.masks, self.backgrounds, self.names)

    def sample(self, n: int, seed: int) -> LabeledDataset:
        """Uniform sample without replacement, no class stratification."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()
