"""Synthetic two-tissue volumes with ellipsoidal FLAIR-bright lesions.

Intensities are in tissue-contrast units: white matter sits at 0 on FLAIR and
grey matter at 1 (T1 is the reverse), so a lesion contrast of 2 is twice the
tissue contrast. A slowly varying additive bias of at most 0.25 and Gaussian
noise are added on top.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PlacementFailure
from .volume import BinaryMask, MultiChannelCase, Volume, save_volume

CHANNELS = ("T1", "FLAIR")
GM_FRACTION = 0.4
BIAS = 0.25
MAX_TRIES = 1000


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    n_channels: int = 2
    n_lesions: tuple[int, int] = (2, 6)
    lesion_radius: tuple[int, int] = (2, 5)
    lesion_contrast: float = 2.0
    noise_sigma: float = 0.3
    rng_seed: int = 0
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        lo, hi = self.lesion_radius
        if lo < 1 or hi < lo:
            raise ValueError("lesion_radius must satisfy 1 <= low <= high")
        if self.n_lesions[0] < 0 or self.n_lesions[1] < self.n_lesions[0]:
            raise ValueError("n_lesions must satisfy 0 <= low <= high")
        if min(self.dims) < 2 * hi + 3:
            raise ValueError(f"dims {self.dims} too small for lesions of radius {hi}")
        if self.n_channels not in (1, 2):
            raise ValueError("n_channels must be 1 (FLAIR) or 2 (T1, FLAIR)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return CHANNELS[2 - self.n_channels:]


@dataclass(frozen=True)
class Lesion:
    center: tuple[int, int, int]
    semi_axes: tuple[int, int, int]


def _case_rng(cfg: PhantomConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, index]))


def _smooth(rng, dims, sigma) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return (field - field.mean()) / field.std()


def ellipsoid(dims, lesion: Lesion) -> np.ndarray:
    """Voxels with sum(((i - c) / a)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    acc = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, lesion.center, lesion.semi_axes))
    return acc <= 1.0


def _layout(cfg: PhantomConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[Lesion]]:
    dims = cfg.dims
    tissue = _smooth(rng, dims, min(dims) / 8)
    gm = tissue > np.quantile(tissue, 1 - GM_FRACTION)
    bias = BIAS * _smooth(rng, dims, min(dims) / 4).clip(-1, 1)
    n = int(rng.integers(cfg.n_lesions[0], cfg.n_lesions[1] + 1))
    lo, hi = cfg.lesion_radius
    mask = np.zeros(dims, dtype=bool)
    grown = np.zeros(dims, dtype=bool)
    lesions: list[Lesion] = []
    tries = 0
    while len(lesions) < n:
        tries += 1
        if tries > MAX_TRIES:
            raise PlacementFailure(f"placed {len(lesions)} of {n} lesions in {MAX_TRIES} tries")
        axes = tuple(int(a) for a in rng.integers(lo, hi + 1, size=3))
        center = tuple(int(rng.integers(a + 1, d - a - 1)) for a, d in zip(axes, dims))
        if gm[center]:
            continue
        les = Lesion(center, axes)
        blob = ellipsoid(dims, les)
        # keep a one-voxel gap so every lesion is its own 26-connected region
        if (blob & grown).any():
            continue
        lesions.append(les)
        mask |= blob
        grown |= ndimage.binary_dilation(blob, structure=np.ones((3, 3, 3), bool))
    return gm, bias, mask, lesions


def lesion_layout(cfg: PhantomConfig, index: int) -> list[Lesion]:
    """The lesions :func:`generate_case` places for ``index``."""
    return _layout(cfg, _case_rng(cfg, index))[3]


def generate_case(cfg: PhantomConfig, index: int) -> MultiChannelCase:
    rng = _case_rng(cfg, index)
    gm, bias, mask, _ = _layout(cfg, rng)
    c = cfg.lesion_contrast
    flair = gm + bias + c * mask
    t1 = (~gm) - bias - 0.5 * c * mask
    channels = {"T1": t1, "FLAIR": flair}
    vols = []
    for name in cfg.channel_names:
        data = channels[name] + cfg.noise_sigma * rng.standard_normal(cfg.dims)
        vols.append((name, Volume(data.astype(np.float32), cfg.voxel_size)))
    return MultiChannelCase(f"case{index:03d}", tuple(vols),
                            BinaryMask(mask.astype(np.uint8), cfg.voxel_size))


def case_files(case_id: str, channel_names) -> list[str]:
    return [f"{case_id}_{name}.mvol" for name in channel_names] + [f"{case_id}_mask.mvol"]


def write_case(case: MultiChannelCase, directory) -> list[str]:
    names = case_files(case.case_id, case.channel_names)
    for name, (_, vol) in zip(names, case.channels):
        save_volume(vol, os.path.join(directory, name))
    save_volume(case.mask, os.path.join(directory, names[-1]))
    return names


def generate_cohort(cfg: PhantomConfig, n_cases: int, directory=None, start: int = 0) -> list[MultiChannelCase]:
    """Cases ``start .. start + n_cases - 1``; writes MVOL files and a manifest when ``directory`` is given."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    cases = [generate_case(cfg, start + k) for k in range(n_cases)]
    if directory is not None:
        os.makedirs(directory, exist_ok=True)
        lines = []
        for case in cases:
            files = write_case(case, directory)
            lines.append(",".join([case.case_id] + files))
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return cases
