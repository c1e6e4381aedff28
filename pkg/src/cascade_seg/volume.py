"""Volumes, masks, the MVOL file format and 3D patch extraction.

Arrays are indexed ``[x, y, z]``; on disk the payload is written x-fastest,
which is Fortran order for such an array.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    CoordOutOfVolume,
    DegenerateVolume,
    DimensionOverflow,
    EvenPatchSize,
    MissingFile,
    MissingMask,
    MvolError,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"MVOL"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
_HEADER = struct.Struct("<4sHBB3I3f")
_MAX_VOXELS = 2**31


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _f32(values) -> tuple[float, float, float]:
    # voxel sizes live in the file as float32, keep them representable
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True)
class Volume:
    """One scalar channel: float32 intensities plus voxel size in mm."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"volume data must be a non-empty 3D array, got {data.shape}")
        vs = _f32(self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel sizes must be strictly positive, got {self.voxel_size}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"mask data must be 3D, got {data.shape}")
        if data.dtype != np.uint8:
            if data.dtype == bool:
                data = data.astype(np.uint8)
            else:
                if not np.isin(data, (0, 1)).all():
                    raise ValueError("mask values must be exactly 0 or 1")
                data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(data)))
        object.__setattr__(self, "voxel_size", _f32(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True)
class MultiChannelCase:
    case_id: str
    channels: tuple[tuple[str, Volume], ...]
    mask: BinaryMask | None = None

    def __post_init__(self):
        channels = tuple((str(name), vol) for name, vol in self.channels)
        if not channels:
            raise ValueError("a case needs at least one channel")
        dims = channels[0][1].dims
        for name, vol in channels:
            if vol.dims != dims:
                raise ShapeMismatch(f"channel {name!r} has dims {vol.dims}, expected {dims}")
        if self.mask is not None and self.mask.dims != dims:
            raise ShapeMismatch(f"mask dims {self.mask.dims} differ from channel dims {dims}")
        object.__setattr__(self, "channels", channels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels[0][1].dims

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return self.channels[0][1].voxel_size

    @property
    def channel_names(self) -> list[str]:
        return [name for name, _ in self.channels]

    def channel(self, name: str) -> Volume:
        for n, vol in self.channels:
            if n == name:
                return vol
        raise KeyError(name)

    def stack(self, order: Sequence[str] | None = None) -> np.ndarray:
        """Channels stacked as a ``(c, nx, ny, nz)`` float32 array."""
        names = self.channel_names if order is None else list(order)
        return np.stack([self.channel(n).data for n in names])


@dataclass(frozen=True)
class PatchSet:
    """Stacked patches ``n x c x p x p x p`` with labels and centre voxels.

    ``coords`` rows are ``(x, y, z)`` for a single case or
    ``(case_index, x, y, z)`` when patches are pooled over cases.
    """

    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray
    p: int = field(default=11)

    def __post_init__(self):
        n = len(self.patches)
        if self.patches.ndim != 5 or self.patches.shape[2:] != (self.p,) * 3:
            raise ShapeMismatch(f"patches must be n x c x {self.p}^3, got {self.patches.shape}")
        if self.p % 2 == 0:
            raise EvenPatchSize(f"patch size must be odd, got {self.p}")
        if len(self.labels) != n or len(self.coords) != n:
            raise ShapeMismatch("patches, labels and coords must have equal length")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def n_channels(self) -> int:
        return self.patches.shape[1]


# ---------------------------------------------------------------- MVOL I/O

def load_volume(path: str | os.PathLike) -> Volume | BinaryMask:
    """Read an MVOL file. float32 payloads give a Volume, uint8 a BinaryMask."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise MissingFile(path) from exc
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not an MVOL file")
    magic, version, dtype_tag, _reserved, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: MVOL version {version}")
    if dtype_tag not in (DTYPE_F32, DTYPE_U8):
        raise MvolError(f"{path}: unknown dtype tag {dtype_tag}")
    dims = (nx, ny, nz)
    n = nx * ny * nz
    if 0 in dims or n > _MAX_VOXELS:
        raise DimensionOverflow(f"{path}: dims {dims}")
    dtype = np.dtype("<f4") if dtype_tag == DTYPE_F32 else np.dtype("u1")
    payload = raw[_HEADER.size:]
    need = n * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayload(f"{path}: {len(payload)} payload bytes, expected {need}")
    if len(payload) > need:
        raise MvolError(f"{path}: {len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if dtype_tag == DTYPE_F32:
        return Volume(data.astype(np.float32), (sx, sy, sz))
    return BinaryMask(data.copy(), (sx, sy, sz))


def load_mask(path: str | os.PathLike) -> BinaryMask:
    obj = load_volume(path)
    if not isinstance(obj, BinaryMask):
        raise MvolError(f"{os.fspath(path)}: expected a uint8 mask file")
    return obj


def save_volume(obj: Volume | BinaryMask, path: str | os.PathLike) -> None:
    if isinstance(obj, BinaryMask):
        tag, dtype = DTYPE_U8, np.dtype("u1")
    else:
        tag, dtype = DTYPE_F32, np.dtype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, tag, 0, *obj.dims, *obj.voxel_size)
    payload = np.asarray(obj.data, dtype=dtype).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


# ----------------------------------------------------------- normalisation

def normalize(v: Volume) -> Volume:
    """Zero mean and unit sample standard deviation (n - 1 denominator) over all voxels."""
    x = v.data.astype(np.float64)
    if x.size < 2:
        raise DegenerateVolume("need at least two voxels to normalise")
    mean = x.mean()
    std = x.std(ddof=1)
    if std < 1e-12:
        raise DegenerateVolume(f"constant volume (std={std:g})")
    return Volume(((x - mean) / std).astype(np.float32), v.voxel_size)


def normalize_case(case: MultiChannelCase) -> MultiChannelCase:
    return MultiChannelCase(
        case.case_id,
        tuple((name, normalize(vol)) for name, vol in case.channels),
        case.mask,
    )


# --------------------------------------------------------- patch extraction

def _check_patch_size(p: int) -> int:
    if p < 1 or p % 2 == 0:
        raise EvenPatchSize(f"patch size must be a positive odd integer, got {p}")
    return (p - 1) // 2


def extract_patch(case: MultiChannelCase, coord: Sequence[int], p: int) -> np.ndarray:
    """The ``c x p x p x p`` window centred on ``coord``; zeros outside the volume."""
    half = _check_patch_size(p)
    dims = case.dims
    coord = tuple(int(c) for c in coord)
    if len(coord) != 3 or any(not 0 <= c < d for c, d in zip(coord, dims)):
        raise CoordOutOfVolume(f"{coord} outside volume of dims {dims}")
    out = np.zeros((len(case.channels), p, p, p), dtype=np.float32)
    src, dst = [], []
    for c, d in zip(coord, dims):
        lo, hi = c - half, c + half + 1
        src.append(slice(max(lo, 0), min(hi, d)))
        dst.append(slice(max(lo, 0) - lo, p - (hi - min(hi, d))))
    for k, (_, vol) in enumerate(case.channels):
        out[(k, *dst)] = vol.data[tuple(src)]
    return out


def padded_stack(stack: np.ndarray, p: int) -> np.ndarray:
    half = _check_patch_size(p)
    return np.pad(stack, ((0, 0),) + ((half, half),) * 3)


def gather_patches(padded: np.ndarray, coords: np.ndarray, p: int) -> np.ndarray:
    """Patches for ``coords`` (n x 3) from a stack padded by :func:`padded_stack`."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    windows = sliding_window_view(padded, (p, p, p), axis=(1, 2, 3))
    if len(coords) == 0:
        return np.zeros((0, padded.shape[0], p, p, p), dtype=np.float32)
    out = windows[:, coords[:, 0], coords[:, 1], coords[:, 2]]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4), dtype=np.float32)


def _check_coords(coords: np.ndarray, dims: tuple[int, ...]) -> None:
    if len(coords) and ((coords < 0).any() or (coords >= np.array(dims)).any()):
        bad = coords[((coords < 0) | (coords >= np.array(dims))).any(axis=1)][0]
        raise CoordOutOfVolume(f"{tuple(bad)} outside volume of dims {dims}")


def build_patchset(
    case: MultiChannelCase,
    coords: Iterable[Sequence[int]],
    p: int,
    with_labels: bool = True,
) -> PatchSet:
    _check_patch_size(p)
    coords = np.asarray(list(coords) if not isinstance(coords, np.ndarray) else coords,
                        dtype=np.int64).reshape(-1, 3)
    _check_coords(coords, case.dims)
    patches = gather_patches(padded_stack(case.stack(), p), coords, p)
    if with_labels:
        if case.mask is None:
            raise MissingMask(f"case {case.case_id} has no mask")
        labels = case.mask.data[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.uint8)
    else:
        labels = np.zeros(len(coords), dtype=np.uint8)
    return PatchSet(patches, labels, coords, p)


def build_pooled_patchset(
    cases: Sequence[MultiChannelCase],
    coords: np.ndarray,
    p: int,
    channel_order: Sequence[str] | None = None,
) -> PatchSet:
    """Patches for ``(case_index, x, y, z)`` rows drawn from several cases."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    n_ch = len(channel_order) if channel_order else len(cases[0].channels)
    patches = np.empty((len(coords), n_ch, p, p, p), dtype=np.float32)
    labels = np.zeros(len(coords), dtype=np.uint8)
    for ci in np.unique(coords[:, 0]):
        rows = np.flatnonzero(coords[:, 0] == ci)
        case = cases[ci]
        xyz = coords[rows, 1:]
        _check_coords(xyz, case.dims)
        patches[rows] = gather_patches(padded_stack(case.stack(channel_order), p), xyz, p)
        if case.mask is not None:
            labels[rows] = case.mask.data[xyz[:, 0], xyz[:, 1], xyz[:, 2]]
    return PatchSet(patches, labels, coords, p)


# --------------------------------------------------------- case directories

def _suffix_ids(directory, suffix: str) -> set[str]:
    return {name[:-len(suffix)] for name in os.listdir(directory) if name.endswith(suffix)}


def case_ids(directory, suffix: str = "_mask.mvol", channels: Sequence[str] = ()) -> list[str]:
    """Sorted ids of files ``<id><suffix>``, or of ``<id>_<channel>.mvol`` for any channel."""
    ids = _suffix_ids(directory, suffix) if suffix else set()
    for ch in channels:
        ids |= _suffix_ids(directory, f"_{ch}.mvol")
    return sorted(ids)


def load_case(directory, case_id: str, channels: Sequence[str], with_mask: bool = True) -> MultiChannelCase:
    """``<id>_<channel>.mvol`` for each channel present, plus ``<id>_mask.mvol`` if asked.

    Missing channel files are skipped so that callers can report which are absent.
    """
    vols = []
    for ch in channels:
        path = os.path.join(directory, f"{case_id}_{ch}.mvol")
        if os.path.exists(path):
            vol = load_volume(path)
            if not isinstance(vol, Volume):
                raise MvolError(f"{path}: expected a float32 volume")
            vols.append((ch, vol))
    if not vols:
        raise MissingFile(f"no channel files for case {case_id} in {directory}")
    mask = None
    if with_mask:
        path = os.path.join(directory, f"{case_id}_mask.mvol")
        if not os.path.exists(path):
            raise MissingMask(f"case {case_id} has no mask file in {directory}")
        mask = load_mask(path)
    return MultiChannelCase(case_id, tuple(vols), mask)
