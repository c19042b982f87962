"""Intensity normalization, cube resampling and per-view slicing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .volume import (
    IntensityVolume,
    LabelVolume,
    Volume,
    VolumeError,
    VolumeHeader,
    ViewAxis,
)

MIN_CUBE_SIDE = 8


def normalize_intensity(v: IntensityVolume, low_pct: float = 2.5, high_pct: float = 97.5) -> IntensityVolume:
    """Percentile-clipped min-max scaling to [0, 1].

    Percentiles use linear interpolation over the sorted voxel values.
    """
    if not 0 <= low_pct < high_pct <= 100:
        raise ValueError(f"need 0 <= low_pct < high_pct <= 100, got {low_pct}, {high_pct}")
    data = v.data.astype(np.float64)
    lo, hi = np.percentile(data, [low_pct, high_pct], method="linear")
    if not hi > lo:
        raise VolumeError("degenerate intensity range: percentiles coincide")
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return IntensityVolume(v.header, out)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # source voxel whose center is nearest the output voxel center;
    # exact ties go to the higher index
    i = np.arange(n_out, dtype=np.int64)
    return np.minimum(((2 * i + 1) * n_in) // (2 * n_out), n_in - 1)


def _linear_axis(data: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = data.shape[axis]
    if n_in == n_out:
        return data
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (pos - i0).astype(data.dtype)
    shape = [1] * data.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    a0 = np.take(data, i0, axis=axis)
    a1 = np.take(data, i1, axis=axis)
    out = a0 + w * (a1 - a0)
    # guard against one-ulp overshoot so the input range is never exceeded
    return np.clip(out, np.minimum(a0, a1), np.maximum(a0, a1))


def resample_nearest(data: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    out = data
    for axis, n_out in enumerate(dims):
        if out.shape[axis] != n_out:
            out = np.take(out, _nearest_index(out.shape[axis], n_out), axis=axis)
    return out


def resample_linear(data: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Separable trilinear resampling on voxel centers, edge values replicated."""
    out = data.astype(np.float32)
    for axis, n_out in enumerate(dims):
        out = _linear_axis(out, axis, n_out)
    return out


def resample_cube(v: Volume, side: int = 512) -> Volume:
    """Resample to ``side``³ preserving physical extent.

    Intensities interpolate trilinearly, labels by nearest neighbour.
    """
    if side < MIN_CUBE_SIDE:
        raise ValueError(f"cube side {side} below network minimum {MIN_CUBE_SIDE}")
    dims = (side, side, side)
    spacing = tuple(e / side for e in v.header.extent_mm)
    header = VolumeHeader(dims, spacing, v.header.modality)
    if isinstance(v, LabelVolume):
        return LabelVolume(header, resample_nearest(v.data, dims))
    return IntensityVolume(header, resample_linear(v.data, dims))


def resample_to_original(seg: LabelVolume, original: VolumeHeader) -> LabelVolume:
    if len(set(seg.header.dims)) != 1:
        raise VolumeError(f"segmentation is not cubic: {seg.header.dims}")
    return LabelVolume(original, resample_nearest(seg.data, original.dims))


# ---------------------------------------------------------------------------
# slicing


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, (IntensityVolume, LabelVolume)) else np.asarray(v)


def extract_slices(v, view) -> list[np.ndarray]:
    data = _as_array(v)
    if data.ndim != 3 or len(set(data.shape)) != 1:
        raise VolumeError(f"extract_slices needs a cube, got shape {data.shape}")
    axis = ViewAxis.parse(view).normal_axis
    return [np.take(data, i, axis=axis) for i in range(data.shape[axis])]


def stack_to_volume(slices: Sequence[np.ndarray], view) -> np.ndarray:
    """Inverse of :func:`extract_slices`; returns the stacked array."""
    slices = [np.asarray(s) for s in slices]
    if not slices:
        raise VolumeError("no slices to stack")
    shape = slices[0].shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise VolumeError(f"slices must be square 2D arrays, got {shape}")
    if any(s.shape != shape for s in slices):
        raise VolumeError("inconsistent slice shapes")
    if len(slices) != shape[0]:
        raise VolumeError(f"{len(slices)} slices cannot form a cube of side {shape[0]}")
    return np.stack(slices, axis=ViewAxis.parse(view).normal_axis)


# ---------------------------------------------------------------------------
# training stream


@dataclass(frozen=True, eq=False)
class SliceBatch:
    images: np.ndarray  # B x H x W x 3, float32, channels identical
    masks: np.ndarray  # B x H x W, uint8
    batch_index: int  # 1-based, monotone over the run
    views: tuple[str, ...]
    epoch: int = 1

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.shape[0] < 1:
            raise ValueError(f"images must be B x H x W x 3 with B >= 1, got {self.images.shape}")
        if self.masks.shape != self.images.shape[:3]:
            raise ValueError("masks must be B x H x W matching images")
        if self.batch_index < 1:
            raise ValueError("batch_index is 1-based")

    @property
    def size(self) -> int:
        return self.images.shape[0]


def replicate_channels(slices: np.ndarray) -> np.ndarray:
    """B x H x W -> B x H x W x 3 with identical channels."""
    return np.repeat(slices[..., None], 3, axis=-1)


def make_training_stream(
    cohort: Sequence[tuple[IntensityVolume, LabelVolume]],
    view,
    batch_size: int,
    seed: int,
) -> Iterator[SliceBatch]:
    """Endless stream of shuffled slice batches, one permutation per epoch.

    The final batch of an epoch may be short when the slice count is not a
    multiple of ``batch_size``.
    """
    if not cohort:
        raise ValueError("empty cohort")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    view = ViewAxis.parse(view)
    sides = {img.header.dims for img, _ in cohort} | {lab.header.dims for _, lab in cohort}
    if len(sides) != 1 or len(set(next(iter(sides)))) != 1:
        raise VolumeError(f"cohort volumes must share one cube side, got {sorted(sides)}")
    axis = view.normal_axis
    # view axis first so slice i of scan s is images[s, i]
    images = np.stack([np.moveaxis(img.data, axis, 0) for img, _ in cohort])
    masks = np.stack([np.moveaxis(lab.data, axis, 0) for _, lab in cohort])
    n_scans, side = images.shape[:2]
    total = n_scans * side
    rng = np.random.Generator(np.random.Philox(seed))

    def stream():
        batch_index = 0
        epoch = 0
        while True:
            epoch += 1
            order = rng.permutation(total)
            for start in range(0, total, batch_size):
                idx = order[start : start + batch_size]
                scan, sl = np.divmod(idx, side)
                batch_index += 1
                yield SliceBatch(
                    images=replicate_channels(images[scan, sl]),
                    masks=masks[scan, sl].copy(),
                    batch_index=batch_index,
                    views=(view.value,) * len(idx),
                    epoch=epoch,
                )

    return stream()


def batches_per_epoch(n_scans: int, side: int, batch_size: int) -> int:
    return -(-n_scans * side // batch_size)
