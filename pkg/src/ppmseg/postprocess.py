"""Probability map -> final binary mask.

threshold at 0.5, keep the largest 8-connected foreground component, fill
background holes that are not 4-connected to the border, then resample to the
original image size with nearest neighbour.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

PROB_THRESHOLD = 0.5
_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


def _squeeze_map(p) -> np.ndarray:
    a = np.asarray(p)
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-image map, got shape {np.shape(p)}")
        a = a[0]
    return a


def threshold(p, t: float = PROB_THRESHOLD) -> np.ndarray:
    return (_squeeze_map(p) >= t).astype(np.uint8)


def largest_component(m) -> np.ndarray:
    """Keep the largest 8-connected foreground blob.

    Ties go to the blob whose first pixel in row-major order comes earliest;
    ``ndimage.label`` numbers blobs in exactly that order, so ``argmax`` over
    the label sizes picks it.
    """
    m = np.asarray(m).astype(bool)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def fill_holes(m) -> np.ndarray:
    m = np.asarray(m).astype(bool)
    return ndimage.binary_fill_holes(m, structure=_FOUR).astype(np.uint8)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each destination pixel under half-pixel nearest resampling."""
    idx = np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resample_nearest(m, size) -> np.ndarray:
    m = np.asarray(m)
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"target size must be at least 1x1, got {size}")
    rows = nearest_indices(m.shape[0], h)
    cols = nearest_indices(m.shape[1], w)
    return m[rows[:, None], cols[None, :]]


def resample_to_original(m, size) -> np.ndarray:
    return resample_nearest(np.asarray(m).astype(np.uint8), size)


def postprocess_pipeline(p, original_size) -> np.ndarray:
    mask = threshold(p)
    if not mask.any():
        return np.zeros(tuple(int(s) for s in original_size), dtype=np.uint8)
    mask = fill_holes(largest_component(mask))
    return resample_to_original(mask, original_size)
