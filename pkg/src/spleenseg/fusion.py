"""Multi-view fusion: union of per-view masks, then 3D opening and closing.

Voxels outside the grid count as background, as if the volume sat in an
infinite empty lattice. Erosion therefore shrinks masks at the border,
while closing is computed on a padded grid so it stays extensive.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, VolumeError

DEFAULT_RADIUS = 3


@lru_cache(maxsize=None)
def ball(radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Discrete Euclidean ball: offsets with squared norm <= radius²."""
    if radius < 1:
        raise ValueError("radius must be a positive integer")
    r = int(radius)
    z, y, x = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    se = (x * x + y * y + z * z) <= r * r
    se.setflags(write=False)
    return se


def _unwrap(mask):
    if isinstance(mask, LabelVolume):
        return mask.data.astype(bool), mask
    return np.asarray(mask).astype(bool), None


def _wrap(data: np.ndarray, like):
    out = data.astype(np.uint8)
    return LabelVolume(like.header, out) if like is not None else out


def erode(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    return ndimage.binary_erosion(mask, structure=se, border_value=0)


def dilate(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=se, border_value=0)


def union_masks(masks: Sequence) -> LabelVolume | np.ndarray:
    if not masks:
        raise ValueError("union_masks needs at least one mask")
    arrays = [_unwrap(m)[0] for m in masks]
    first = masks[0]
    for m, a in zip(masks, arrays):
        if a.shape != arrays[0].shape:
            raise VolumeError(f"dims mismatch: {a.shape} vs {arrays[0].shape}")
        if isinstance(m, LabelVolume) and isinstance(first, LabelVolume) and m.header.spacing != first.header.spacing:
            raise VolumeError("spacing mismatch between masks")
    return _wrap(np.logical_or.reduce(arrays), first if isinstance(first, LabelVolume) else None)


def binary_open(mask, radius: int = DEFAULT_RADIUS):
    data, like = _unwrap(mask)
    se = ball(radius)
    return _wrap(dilate(erode(data, se), se), like)


def binary_close(mask, radius: int = DEFAULT_RADIUS):
    data, like = _unwrap(mask)
    se = ball(radius)
    r = int(radius)
    padded = np.pad(data, r, constant_values=False)
    closed = erode(dilate(padded, se), se)
    return _wrap(closed[r:-r, r:-r, r:-r], like)


def fuse_multiview(axial, coronal, sagittal, radius: int = DEFAULT_RADIUS):
    """Union of the three view masks, opened then closed with a ball."""
    merged = union_masks([axial, coronal, sagittal])
    return binary_close(binary_open(merged, radius), radius)
