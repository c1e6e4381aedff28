"""Voxel overlap, volume difference, region detection rates and cohort summaries.

All percentages are in [0, 100]. Regions are 26-connected components.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateVariance, EmptyGroundTruth, ShapeMismatch, UndefinedRatio
from .volume import BinaryMask

log = logging.getLogger(__name__)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
CSV_HEADER = "case_id,vd,tpr,fpr,dsc,ppv,seg_vol_ml,gt_vol_ml"


def _bool(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    return data.astype(bool, copy=False)


def _pair(seg, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = _bool(seg), _bool(gt)
    if a.shape != b.shape:
        raise ShapeMismatch(f"segmentation {a.shape} and ground truth {b.shape} differ")
    return a, b


def label_components(mask) -> tuple[np.ndarray, int]:
    """26-connected component labels (0 = background) and their count."""
    labels, n = ndimage.label(_bool(mask), structure=CONNECTIVITY_26)
    return labels, int(n)


# --------------------------------------------------------------- voxel level

@dataclass(frozen=True)
class VoxelCounts:
    tp: int
    fp: int
    fn: int

    @property
    def seg_total(self) -> int:
        return self.tp + self.fp

    @property
    def gt_total(self) -> int:
        return self.tp + self.fn


def voxel_counts(seg, gt) -> VoxelCounts:
    a, b = _pair(seg, gt)
    tp = int(np.count_nonzero(a & b))
    return VoxelCounts(tp, int(np.count_nonzero(a)) - tp, int(np.count_nonzero(b)) - tp)


def dsc(counts: VoxelCounts) -> float:
    """Dice overlap in percent; 100 when both masks are empty."""
    denom = counts.fn + counts.fp + 2 * counts.tp
    if denom == 0:
        log.info("DSC of two empty masks taken as 100")
        return 100.0
    return 200.0 * counts.tp / denom


def vd(seg_total: int, gt_total: int) -> float:
    """Absolute lesion-volume difference relative to the manual volume, percent."""
    if gt_total <= 0:
        raise EmptyGroundTruth("volume difference needs a non-empty ground truth")
    return 100.0 * abs(seg_total - gt_total) / gt_total


# -------------------------------------------------------------- region level

@dataclass(frozen=True)
class RegionCounts:
    tp: int
    fn: int
    fp: int
    n_seg: int = 0
    n_gt: int = 0


def region_match(seg, gt, min_overlap: float = 0.0) -> RegionCounts:
    """Detection counts between the components of ``seg`` and ``gt``.

    A ground-truth region is detected when output voxels cover at least
    ``min_overlap`` of it (and always at least one voxel). An output region
    is a false detection when it touches no ground-truth voxel.
    """
    a, b = _pair(seg, gt)
    seg_lab, n_seg = label_components(a)
    gt_lab, n_gt = label_components(b)
    both = a & b
    gt_sizes = np.bincount(gt_lab.ravel(), minlength=n_gt + 1)
    gt_cover = np.bincount(gt_lab[both], minlength=n_gt + 1)
    need = np.maximum(1, np.ceil(min_overlap * gt_sizes - 1e-9)).astype(np.int64)
    detected = int(np.count_nonzero(gt_cover[1:] >= need[1:]))
    touching = np.unique(seg_lab[both])
    fp = n_seg - int(np.count_nonzero(touching))
    return RegionCounts(detected, n_gt - detected, fp, n_seg, n_gt)


def _ratio(num: int, denom: int, what: str, undefined: float | None) -> float:
    if denom == 0:
        if undefined is None:
            raise UndefinedRatio(f"{what} undefined: zero denominator")
        log.info("%s undefined (zero denominator), reported as %s", what, undefined)
        return float(undefined)
    return 100.0 * num / denom


def tpr(rc: RegionCounts, undefined: float | None = None) -> float:
    return _ratio(rc.tp, rc.tp + rc.fn, "TPR", undefined)


def fpr(rc: RegionCounts, undefined: float | None = None) -> float:
    return _ratio(rc.fp, rc.fp + rc.tp, "FPR", undefined)


def ppv(counts: VoxelCounts, rc: RegionCounts | None = None, region_level: bool = False,
        undefined: float | None = None) -> float:
    """Precision, voxel-wise by default; ``region_level`` uses output regions instead."""
    if region_level:
        if rc is None:
            raise ValueError("region-level PPV needs RegionCounts")
        return _ratio(rc.n_seg - rc.fp, rc.n_seg, "PPV", undefined)
    return _ratio(counts.tp, counts.tp + counts.fp, "PPV", undefined)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch("pearson_r needs two equal-length 1-D sequences")
    if len(x) < 3:
        raise DegenerateVariance("pearson_r needs at least three pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("one of the sequences is constant")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class EvalReport:
    case_id: str
    vd: float
    tpr: float
    fpr: float
    dsc: float
    ppv: float
    voxels: VoxelCounts
    regions: RegionCounts
    seg_vol_ml: float
    gt_vol_ml: float

    def csv_row(self) -> str:
        vals = (self.vd, self.tpr, self.fpr, self.dsc, self.ppv, self.seg_vol_ml, self.gt_vol_ml)
        return ",".join([self.case_id] + [f"{v:.6f}" for v in vals])


def evaluate_case(seg, gt, case_id: str = "", voxel_size=(1.0, 1.0, 1.0),
                  min_overlap: float = 0.0) -> EvalReport:
    """All per-case scores. Undefined ratios are reported as 0, an empty ground truth gives VD NaN."""
    counts = voxel_counts(seg, gt)
    rc = region_match(seg, gt, min_overlap)
    try:
        v = vd(counts.seg_total, counts.gt_total)
    except EmptyGroundTruth:
        log.warning("case %s has an empty ground truth; VD reported as NaN", case_id)
        v = float("nan")
    ml = float(np.prod(voxel_size, dtype=np.float64)) / 1000.0
    return EvalReport(case_id, v, tpr(rc, 0.0), fpr(rc, 0.0), dsc(counts), ppv(counts, undefined=0.0),
                      counts, rc, counts.seg_total * ml, counts.gt_total * ml)


def mean_row(reports: list[EvalReport]) -> str:
    cols = np.array([[r.vd, r.tpr, r.fpr, r.dsc, r.ppv, r.seg_vol_ml, r.gt_vol_ml] for r in reports])
    return ",".join(["mean"] + [f"{v:.6f}" for v in cols.mean(axis=0)])


def report_csv(reports: list[EvalReport]) -> str:
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    if reports:
        lines.append(mean_row(reports))
    return "\n".join(lines) + "\n"
