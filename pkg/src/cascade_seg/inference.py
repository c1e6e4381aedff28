"""Two-pass cascade scoring, thresholding with a minimum lesion size, parameter search."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine.dense import dense_probability
from .errors import ChannelMismatch, NoMask, ShapeMismatch
from .metrics import VoxelCounts, dsc, label_components, region_match, voxel_counts, tpr, fpr
from .volume import BinaryMask, MultiChannelCase, gather_patches, padded_stack

log = logging.getLogger(__name__)

PRUNE_THRESHOLD = 0.5
T_BIN_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
L_MIN_GRID = tuple(range(0, 101, 5))
# CNN2 runs patch by patch on the surviving voxels unless they are more than
# this fraction of the volume, where one dense pass is cheaper
DENSE_FRACTION = 0.05
PATCH_BATCH = 256


@dataclass(frozen=True)
class ProbabilityMap:
    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeMismatch(f"probability map must be 3-D, got {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class SegmentationOutput:
    prob: ProbabilityMap
    binary: BinaryMask
    regions: list[np.ndarray]
    params_used: tuple[float, int]


def case_stack(case: MultiChannelCase, channel_order: Sequence[str]) -> np.ndarray:
    missing = [c for c in channel_order if c not in case.channel_names]
    if missing:
        raise ChannelMismatch(f"case {case.case_id} lacks channel(s) {', '.join(missing)}")
    return case.stack(channel_order)


def score_voxels(network, stack: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Class-1 probability of the patches centred on ``coords`` (n x 3), in fixed batches."""
    p = network.input_shape[1]
    padded = padded_stack(stack, p)
    out = np.empty(len(coords), dtype=np.float32)
    for start in range(0, len(coords), PATCH_BATCH):
        rows = coords[start:start + PATCH_BATCH]
        out[start:start + len(rows)] = network.predict_proba(gather_patches(padded, rows, p))
    return out


def cascade_maps(cnn1, cnn2, stack: np.ndarray, chunk: int | None = None,
                 y1: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(Y1, output)`` over a ``(c, nx, ny, nz)`` stack.

    The output is CNN2's probability wherever Y1 >= 0.5 and exactly 0 elsewhere.
    ``chunk`` is the z-slab size of the dense pass.
    """
    if y1 is None:
        y1 = dense_probability(cnn1, stack, chunk)
    keep = y1 >= PRUNE_THRESHOLD
    out = np.zeros_like(y1)
    n_keep = int(np.count_nonzero(keep))
    if n_keep > DENSE_FRACTION * keep.size:
        out[keep] = dense_probability(cnn2, stack, chunk)[keep]
    elif n_keep:
        out[keep] = score_voxels(cnn2, stack, np.argwhere(keep))
    return y1, out


def predict_probability(model, case: MultiChannelCase, chunk: int | None = None,
                        y1: np.ndarray | None = None) -> ProbabilityMap:
    """Cascade lesion probability for every voxel of a normalized case."""
    stack = case_stack(case, model.channel_order)
    _, out = cascade_maps(model.cnn1, model.cnn2, stack, chunk, y1)
    return ProbabilityMap(out, case.voxel_size)


def _as_array(prob) -> np.ndarray:
    return prob.data if isinstance(prob, ProbabilityMap) else np.asarray(prob)


def binarize_and_filter(prob, t_bin: float, l_min: int) -> SegmentationOutput:
    """Threshold at ``t_bin`` and drop 26-connected regions smaller than ``l_min`` voxels."""
    data = _as_array(prob)
    if not isinstance(prob, ProbabilityMap):
        prob = ProbabilityMap(data)
    labels, n = label_components(data.astype(np.float64) >= t_bin)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= l_min
    keep[0] = False
    binary = keep[labels]
    kept = np.flatnonzero(keep)
    regions = []
    if len(kept):
        order = np.argsort(labels, axis=None, kind="stable")
        starts = np.cumsum(sizes)
        flat = np.unravel_index(order, labels.shape)
        coords = np.stack(flat, axis=1)
        for lab in kept:
            regions.append(coords[starts[lab - 1]:starts[lab]])
    mask = BinaryMask(binary.astype(np.uint8), prob.voxel_size)
    return SegmentationOutput(prob, mask, regions, (float(t_bin), int(l_min)))


# -------------------------------------------------------- parameter search

def _dsc_table(prob: np.ndarray, gt: np.ndarray, t_grid, l_grid) -> np.ndarray:
    """Integer ``(tp, seg_total)`` for every grid cell; shape ``(len(t), len(l), 2)``."""
    table = np.zeros((len(t_grid), len(l_grid), 2), dtype=np.int64)
    prob = prob.astype(np.float64)
    l_arr = np.asarray(l_grid, dtype=np.int64)
    for i, t in enumerate(t_grid):
        labels, n = label_components(prob >= t)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
        overlap = np.bincount(labels[gt], minlength=n + 1)[1:]
        keep = sizes[None, :] >= l_arr[:, None]
        table[i, :, 0] = (keep * overlap).sum(axis=1)
        table[i, :, 1] = (keep * sizes).sum(axis=1)
    return table


def dsc_grid(prob, mask, t_grid=T_BIN_GRID, l_grid=L_MIN_GRID) -> np.ndarray:
    """DSC (percent) for every ``(t_bin, l_min)`` cell."""
    gt = np.asarray(mask.data if isinstance(mask, BinaryMask) else mask).astype(bool)
    table = _dsc_table(_as_array(prob), gt, t_grid, l_grid)
    denom = table[..., 1] + int(gt.sum())
    return np.where(denom > 0, 200.0 * table[..., 0] / np.maximum(denom, 1), 100.0)


def best_case_params(prob, mask, t_grid=T_BIN_GRID, l_grid=L_MIN_GRID) -> tuple[float, int, float]:
    """Grid cell with the highest DSC; ties go to smaller t_bin, then smaller l_min."""
    gt = np.asarray(mask.data if isinstance(mask, BinaryMask) else mask).astype(bool)
    data = _as_array(prob)
    if data.shape != gt.shape:
        raise ShapeMismatch(f"probability map {data.shape} and mask {gt.shape} differ")
    table = _dsc_table(data, gt, t_grid, l_grid)
    g = int(gt.sum())
    best = None
    for i in range(len(t_grid)):
        for j in range(len(l_grid)):
            tp, s = (int(v) for v in table[i, j])
            # compare 2tp/(s+g) exactly as fractions
            if best is None or tp * (best[1] + g) > best[0] * (s + g):
                best = (tp, s, i, j)
    tp, s, i, j = best
    return t_grid[i], l_grid[j], dsc(VoxelCounts(tp, s - tp, g - tp))


def average_params(per_case: Sequence[tuple[float, int]], t_grid=T_BIN_GRID) -> tuple[float, int]:
    """Mean of per-case optima; t_bin snaps to the grid (lower on ties), l_min rounds half up."""
    t_mean = float(np.mean([t for t, _ in per_case]))
    l_mean = float(np.mean([l for _, l in per_case]))
    grid = np.asarray(t_grid, dtype=np.float64)
    dist = np.round(np.abs(grid - t_mean), 9)
    t_bin = float(grid[np.flatnonzero(dist == dist.min())[0]])
    return t_bin, int(np.floor(l_mean + 0.5))


def optimize_test_params(model, cases: Sequence[MultiChannelCase], t_grid=T_BIN_GRID,
                         l_grid=L_MIN_GRID, prob_maps=None, chunk: int | None = None) -> tuple[float, int]:
    """Average of the per-case best (t_bin, l_min) over training cases.

    ``prob_maps`` may supply precomputed probability maps, in which case
    ``model`` is not used.
    """
    per_case = []
    for k, case in enumerate(cases):
        if case.mask is None:
            raise NoMask(f"case {case.case_id} has no mask")
        prob = prob_maps[k] if prob_maps is not None else predict_probability(model, case, chunk)
        t, l, score = best_case_params(prob, case.mask, t_grid, l_grid)
        log.info("case %s: best t_bin=%.2f l_min=%d DSC=%.2f", case.case_id, t, l, score)
        per_case.append((t, l))
    return average_params(per_case, t_grid)


def roc_sweep(prob, mask, l_min: int, thresholds=T_BIN_GRID) -> list[tuple[float, float, float, float]]:
    """``(t_bin, TPR, FPR, DSC)`` per threshold; undefined rates reported as 0."""
    data = _as_array(prob)
    gt = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    if data.shape != gt.shape:
        raise ShapeMismatch(f"probability map {data.shape} and mask {gt.shape} differ")
    rows = []
    for t in thresholds:
        seg = binarize_and_filter(data, t, l_min).binary
        rc = region_match(seg, gt)
        rows.append((float(t), tpr(rc, 0.0), fpr(rc, 0.0), dsc(voxel_counts(seg, gt))))
    return rows


def roc_csv(rows) -> str:
    lines = ["t_bin,tpr,fpr,dsc"] + [f"{t:.2f},{a:.6f},{b:.6f},{c:.6f}" for t, a, b, c in rows]
    return "\n".join(lines) + "\n"
