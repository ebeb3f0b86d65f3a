"""Procedural labelled images for smoke runs and demos.

Each image is a smooth random colour field with one foreground shape whose
type is the class label. Images are quantized to multiples of 1/255 so they
survive a round trip through the binary dataset writers unchanged.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .imagedata import LabeledDataset

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        t = 0.3 * r
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "bar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= 1.1 * r)
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((3, 4, 4))
    field = np.stack([ndimage.zoom(c, size / 4, order=1, mode="nearest") for c in coarse])
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    contrast = rng.uniform(0.2, 0.5)
    return base + contrast * (field - 0.5)


def make_shapes(n: int, size: int = 32, num_classes: int = 2, seed: int = 0,
                noise: float = 0.02, name: str = "shapes") -> LabeledDataset:
    """``n`` images of ``size`` x ``size`` with balanced labels in ``[0, num_classes)``."""
    if num_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} classes supported")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        img = _background(rng, size)
        r = rng.uniform(0.22, 0.34) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(SHAPES[y], size, cy, cx, r)
        colour = rng.random(3)
        # keep the object visible against the local background
        bg_mean = img[:, mask].mean(axis=1) if mask.any() else img.mean(axis=(1, 2))
        colour = np.where(np.abs(colour - bg_mean) < 0.3, 1.0 - bg_mean, colour)
        img[:, mask] = colour[:, None]
        img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6))
        img += noise * rng.standard_normal(img.shape)
        images[i] = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
    return LabeledDataset(images, labels, num_classes, name)


def random_bytes_dataset(n: int, size: int, num_classes: int, seed: int = 0,
                         name: str = "random") -> LabeledDataset:
    """Uniform random quantized pixels; cheap filler for full-size layout fixtures."""
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, size=(n, 3, size, size), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n)
    return LabeledDataset(pix.astype(np.float32) / 255.0, labels, num_classes, name)
