"""Volumetric and surface segmentation metrics, Wilcoxon signed-rank test, cohort summaries."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelVolume, VolumeError

_SIX = ndimage.generate_binary_structure(3, 1)

METRICS = ("dsc", "msd_mm", "hd_mm")
EXACT_MAX_N = 15


def _arr(mask) -> np.ndarray:
    return (mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)).astype(bool)


def dice_coefficient(A, B) -> float:
    a, b = _arr(A), _arr(B)
    if a.shape != b.shape:
        raise VolumeError(f"dims mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a 6-neighbour that is background or off-grid, as N x 3 indices."""
    m = _arr(mask)
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return np.argwhere(m & ~interior)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * s)
    dist, _ = tree.query(src * s, k=1)
    return dist


def _surfaces(A, B):
    sa, sb = surface_voxels(A), surface_voxels(B)
    if len(sa) == 0 or len(sb) == 0:
        raise VolumeError("undefined surface distance: empty mask")
    return sa, sb


def _spacing(A, spacing):
    if spacing is None:
        if isinstance(A, LabelVolume):
            return A.header.spacing
        return (1.0, 1.0, 1.0)
    return spacing


def mean_surface_distance(A, B, spacing=None) -> float:
    """Average of the two directed mean nearest-surface distances, in mm."""
    spacing = _spacing(A, spacing)
    sa, sb = _surfaces(A, B)
    return 0.5 * (_directed(sa, sb, spacing).mean() + _directed(sb, sa, spacing).mean())


def hausdorff_distance(A, B, spacing=None) -> float:
    """Exact (100th percentile) symmetric Hausdorff distance between surfaces, in mm."""
    spacing = _spacing(A, spacing)
    sa, sb = _surfaces(A, B)
    return float(max(_directed(sa, sb, spacing).max(), _directed(sb, sa, spacing).max()))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    exact: bool


def _rank_abs(d: np.ndarray) -> np.ndarray:
    from scipy.stats import rankdata

    return rankdata(np.abs(d), method="average")


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired test on y - x with zero differences dropped.

    The statistic is min(W+, W-). For n <= 15 the p-value comes from
    enumerating all 2^n sign assignments of the observed ranks; beyond that,
    a normal approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be paired 1D sequences of equal length")
    d = y - x
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise ValueError(f"insufficient pairs: {n} nonzero differences, need at least 5")
    ranks = _rank_abs(d)
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    stat = min(w_plus, total - w_plus)
    if n <= EXACT_MAX_N:
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        null = signs @ ranks
        null_stat = np.minimum(null, total - null)
        # ranks are multiples of 0.5, so a small tolerance makes ties exact
        p = float(np.count_nonzero(null_stat <= stat + 1e-9)) / null.size
        return WilcoxonResult(stat, min(1.0, p), n, True)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(stat, min(1.0, p), n, False)


# ---------------------------------------------------------------------------
# per-scan scores and cohort summaries


@dataclass(frozen=True)
class ScanScore:
    scan_id: str
    dsc: float
    msd_mm: float
    hd_mm: float


@dataclass
class MetricSummary:
    median: float
    mean: float
    std: float
    pvalue: float | None = None


@dataclass
class CohortSummary:
    n: int
    metrics: dict[str, MetricSummary] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "metrics": {
                k: {"median": v.median, "mean": v.mean, "std": v.std, "pvalue": v.pvalue}
                for k, v in self.metrics.items()
            },
        }


def score_scan(scan_id: str, pred, truth, spacing=None) -> ScanScore:
    spacing = _spacing(truth, spacing)
    dsc = dice_coefficient(pred, truth)
    if _arr(pred).any() and _arr(truth).any():
        msd = mean_surface_distance(pred, truth, spacing)
        hd = hausdorff_distance(pred, truth, spacing)
    else:
        msd = hd = math.inf
    return ScanScore(scan_id, dsc, float(msd), float(hd))


def lower_median(values: Sequence[float]) -> float:
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def _describe(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return MetricSummary(lower_median(arr), float(arr.mean()), std)


def summarize(scores: Sequence[ScanScore], reference: Sequence[ScanScore] | None = None) -> CohortSummary:
    """Median / mean / sample std per metric, with paired Wilcoxon p-values vs ``reference``.

    Medians take the lower middle element for even counts. A p-value stays
    ``None`` when the paired differences are too few for the test.
    """
    if not scores:
        raise ValueError("summarize needs at least one score")
    if reference is not None and len(reference) != len(scores):
        raise ValueError(f"length mismatch: {len(scores)} scores vs {len(reference)} reference")
    summary = CohortSummary(len(scores))
    for metric in METRICS:
        values = [getattr(s, metric) for s in scores]
        summary.metrics[metric] = _describe(values)
        if reference is not None:
            ref = [getattr(r, metric) for r in reference]
            try:
                summary.metrics[metric].pvalue = wilcoxon_signed_rank(ref, values).pvalue
            except ValueError:
                summary.metrics[metric].pvalue = None
    return summary


def write_scores_csv(scores: Sequence[ScanScore], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *METRICS])
        for s in scores:
            w.writerow([s.scan_id, repr(s.dsc), repr(s.msd_mm), repr(s.hd_mm)])


def read_scores_csv(path) -> list[ScanScore]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ScanScore(r["id"], float(r["dsc"]), float(r["msd_mm"]), float(r["hd_mm"])) for r in rows]


_LABELS = {"dsc": "DSC", "msd_mm": "MSD (mm)", "hd_mm": "HD (mm)"}


def format_summary(summary: CohortSummary, method: str = "method") -> str:
    """Metric x {median, mean±std} grid, one row per method."""
    header = ["Method"]
    for m in METRICS:
        header += [f"{_LABELS[m]} median", f"{_LABELS[m]} mean±std"]
    row = [method]
    for m in METRICS:
        s = summary.metrics[m]
        row += [f"{s.median:.3f}", f"{s.mean:.3f}±{s.std:.3f}"]
    lines = ["\t".join(header), "\t".join(row)]
    pvals = [(m, summary.metrics[m].pvalue) for m in METRICS if summary.metrics[m].pvalue is not None]
    for m, p in pvals:
        lines.append(f"wilcoxon_p\t{m}\t{p:.6g}")
    return "\n".join(lines) + "\n"
