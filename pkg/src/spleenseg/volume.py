"""Volume containers and on-disk formats (NIfTI-1 plus a raw+JSON fallback)."""

from __future__ import annotations

import enum
import gzip
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


class VolumeError(ValueError):
    """Raised when a volume or its file violates a container invariant."""


class Modality(str, enum.Enum):
    T1W = "T1w"
    T2W = "T2w"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        for m in cls:
            if m.value.lower() == str(value).strip().lower():
                return m
        return cls.UNKNOWN


class ViewAxis(str, enum.Enum):
    """Slicing view; ``normal_axis`` is the array axis the view slices along."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def normal_axis(self) -> int:
        # canonical order: axis 0 sagittal-normal, 1 coronal-normal, 2 axial-normal
        return {"sagittal": 0, "coronal": 1, "axial": 2}[self.value]

    @classmethod
    def parse(cls, value) -> "ViewAxis":
        if isinstance(value, ViewAxis):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown view {value!r}; expected axial, coronal or sagittal") from None


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    modality: Modality = Modality.UNKNOWN

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise VolumeError("expected 3D volume: dims and spacing need three entries")
        if any(d < 1 for d in dims):
            raise VolumeError(f"non-positive dims {dims}")
        if any(not math.isfinite(s) for s in spacing):
            raise VolumeError(f"non-finite spacing {spacing}")
        if any(s <= 0 for s in spacing):
            raise VolumeError(f"non-positive spacing {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", Modality.parse(self.modality))

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_shape(self.header, data)
        if not np.all(np.isfinite(data)):
            raise VolumeError("non-finite intensity values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_shape(self.header, data)
        if data.dtype != np.uint8:
            if not np.all(np.isfinite(data)):
                raise VolumeError("non-finite label values")
        if not np.all((data == 0) | (data == 1)):
            raise VolumeError("label values must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))


Volume = Union[IntensityVolume, LabelVolume]


def _check_shape(header: VolumeHeader, data: np.ndarray) -> None:
    if data.ndim != 3:
        raise VolumeError(f"expected 3D volume, got array of rank {data.ndim}")
    if tuple(data.shape) != header.dims:
        raise VolumeError(f"data shape {data.shape} does not match header dims {header.dims}")


def with_data(like: Volume, data: np.ndarray, header: VolumeHeader | None = None) -> Volume:
    """New volume of the same kind as ``like`` holding ``data``."""
    header = header or VolumeHeader(data.shape, like.header.spacing, like.header.modality)
    return type(like)(header, data)


# ---------------------------------------------------------------------------
# I/O

_NIFTI_SUFFIXES = (".nii", ".nii.gz")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(_NIFTI_SUFFIXES)


def _raw_pair(path: Path) -> tuple[Path, Path]:
    name = path.name
    for suffix in (".raw", ".json"):
        if name.endswith(suffix):
            stem = name[: -len(suffix)]
            return path.with_name(stem + ".raw"), path.with_name(stem + ".json")
    raise VolumeError(f"unrecognized volume extension: {path}")


def load_volume(path) -> Volume:
    """Read a NIfTI-1 or raw+sidecar volume into canonical axis order.

    Integer-typed files load as :class:`LabelVolume`, float files as
    :class:`IntensityVolume`.
    """
    path = Path(path)
    if _is_nifti(path):
        return _load_nifti(path)
    raw, sidecar = _raw_pair(path)
    return _load_raw(raw, sidecar)


def save_volume(volume: Volume, path) -> None:
    path = Path(path)
    # data arrays are mutable; re-validate before writing
    if isinstance(volume, IntensityVolume):
        if not np.all(np.isfinite(volume.data)):
            raise VolumeError("refusing to save: non-finite intensity values")
    elif isinstance(volume, LabelVolume):
        if not np.all((volume.data == 0) | (volume.data == 1)):
            raise VolumeError("refusing to save: label values must be 0 or 1")
    else:
        raise TypeError(f"not a volume: {type(volume).__name__}")
    if tuple(volume.data.shape) != volume.header.dims:
        raise VolumeError("refusing to save: data shape does not match header")
    if not path.parent.exists():
        raise VolumeError(f"unwritable path: directory {path.parent} does not exist")
    if _is_nifti(path):
        _save_nifti(volume, path)
    else:
        raw, sidecar = _raw_pair(path)
        _save_raw(volume, raw, sidecar)


def _stored_zooms(path: Path) -> tuple[float, ...]:
    # nibabel's checked load silently rewrites zero pixdim to 1; read it unchecked
    import nibabel as nib
    from nibabel.openers import ImageOpener

    with ImageOpener(str(path)) as fh:
        hdr = nib.Nifti1Header.from_fileobj(fh, check=False)
    return tuple(float(z) for z in hdr["pixdim"][1:4])


def _load_nifti(path: Path) -> Volume:
    import nibabel as nib

    if not path.exists():
        raise VolumeError(f"missing file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeError(f"malformed NIfTI header in {path}: {exc}") from exc
    if len(img.shape) != 3:
        raise VolumeError(f"expected 3D volume, {path} has shape {img.shape}")
    zooms = _stored_zooms(path)
    if any(not math.isfinite(z) for z in zooms):
        raise VolumeError(f"non-finite spacing {zooms} in {path}")
    if any(z <= 0 for z in zooms):
        raise VolumeError(f"non-positive spacing {zooms} in {path}")
    img = nib.as_closest_canonical(img)
    descrip = img.header["descrip"].tobytes().split(b"\x00")[0].decode("ascii", "ignore")
    is_label = np.issubdtype(img.get_data_dtype(), np.integer)
    data = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    header = VolumeHeader(data.shape, spacing, Modality.parse(descrip))
    if is_label:
        return LabelVolume(header, data)
    data = data.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"non-finite values in {path}")
    return IntensityVolume(header, data)


def _save_nifti(volume: Volume, path: Path) -> None:
    import nibabel as nib

    affine = np.diag([*volume.header.spacing, 1.0])
    if isinstance(volume, LabelVolume):
        data = volume.data.astype(np.uint8)
    else:
        data = volume.data.astype(np.float32)
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(data.dtype)
    img.header.set_zooms(volume.header.spacing)
    img.header["descrip"] = volume.header.modality.value.encode("ascii")
    # no intensity scaling: round-trips must be bit exact
    img.header.set_slope_inter(1.0, 0.0)
    if path.name.endswith(".gz"):
        # fixed gzip mtime keeps repeated writes byte-identical
        path.write_bytes(gzip.compress(img.to_bytes(), mtime=0))
    else:
        nib.save(img, str(path))


def _load_raw(raw: Path, sidecar: Path) -> Volume:
    for p in (raw, sidecar):
        if not p.exists():
            raise VolumeError(f"missing file: {p}")
    try:
        meta = json.loads(sidecar.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        dtype = str(meta.get("dtype", "float32"))
        modality = meta.get("modality", "unknown")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed sidecar {sidecar}: {exc}") from exc
    if len(dims) != 3:
        raise VolumeError(f"expected 3D volume, sidecar lists dims {dims}")
    header = VolumeHeader(dims, spacing, Modality.parse(modality))
    payload = np.fromfile(raw, dtype="<f4")
    if payload.size != math.prod(dims):
        raise VolumeError(f"raw payload has {payload.size} values, dims {dims} need {math.prod(dims)}")
    data = payload.reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"non-finite values in {raw}")
    if dtype == "uint8":
        return LabelVolume(header, data)
    if dtype != "float32":
        raise VolumeError(f"unsupported dtype {dtype!r} in {sidecar}")
    return IntensityVolume(header, data)


def _save_raw(volume: Volume, raw: Path, sidecar: Path) -> None:
    # payload is always little-endian float32 in C order (axis 2 fastest);
    # the sidecar dtype names the logical element type
    volume.data.astype("<f4").tofile(raw)
    meta = {
        "dims": list(volume.header.dims),
        "spacing_mm": list(volume.header.spacing),
        "modality": volume.header.modality.value,
        "dtype": "uint8" if isinstance(volume, LabelVolume) else "float32",
    }
    sidecar.write_text(json.dumps(meta, indent=2))
