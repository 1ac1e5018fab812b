"""Segmentation evaluation: overlap, volume, and surface-distance metrics.

Distances are computed between extracted boundary voxels (foreground voxels
with at least one background neighbor, out-of-bounds counting as
background) whose coordinates are scaled to millimetres by the voxel
spacing. The mean absolute distance is reported as the symmetric mean
surface distance, and the maximum distance over extracted surfaces serves
as both HD and MSSD.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DimensionError, ValidationError


@dataclass
class SurfacePointSet:
    points: np.ndarray  # (n, rank) voxel-center coordinates in mm
    extents: tuple[int, ...]
    spacing: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.points)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"extent mismatch {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def ravd(a: np.ndarray, b: np.ndarray) -> float:
    """Relative absolute volume difference in percent, ground truth first."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"extent mismatch {a.shape} vs {b.shape}")
    na = int(a.sum())
    if na == 0:
        return math.nan  # undefined; callers flag rather than crash
    return 100.0 * abs(int(b.sum()) - na) / na


def extract_surface(mask: np.ndarray, spacing=None,
                    connectivity: int = 6) -> SurfacePointSet:
    """Boundary voxels of a binary mask under face (6) or full (26) adjacency.

    For 2D masks the connectivity values map to 4 and 8 neighbors.
    """
    mask = np.asarray(mask, dtype=bool)
    rank = mask.ndim
    if spacing is None:
        spacing = (1.0,) * rank
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != rank:
        raise ConfigError(f"spacing must have {rank} entries")
    if connectivity not in (6, 26):
        raise ConfigError("connectivity must be 6 or 26")

    if connectivity == 6:
        offsets = [
            off for off in np.ndindex(*(3,) * rank)
            if sum(abs(o - 1) for o in off) == 1
        ]
    else:
        offsets = [
            off for off in np.ndindex(*(3,) * rank)
            if any(o != 1 for o in off)
        ]
    # a voxel is on the surface if any neighbor (zero-padded) is background
    padded = np.pad(mask, 1)
    boundary = np.zeros_like(mask)
    core = tuple(slice(1, 1 + n) for n in mask.shape)
    for off in offsets:
        shifted = padded[tuple(slice(o, o + n) for o, n in zip(off, mask.shape))]
        boundary |= ~shifted
    boundary &= mask
    idx = np.argwhere(boundary)
    points = idx.astype(np.float64) * np.asarray(spacing)
    return SurfacePointSet(points=points, extents=mask.shape, spacing=spacing)


def surface_distances(sa: SurfacePointSet, sb: SurfacePointSet) -> dict:
    """Symmetric surface distances in mm: mad, assd, mssd, hd.

    mad is the symmetric mean surface distance (identical to assd); hd and
    mssd coincide because both are taken over extracted surfaces. Empty
    inputs yield NaN for every entry.
    """
    if len(sa) == 0 or len(sb) == 0:
        nan = math.nan
        return {"mad": nan, "assd": nan, "mssd": nan, "hd": nan}
    d_ab, _ = cKDTree(sb.points).query(sa.points)
    d_ba, _ = cKDTree(sa.points).query(sb.points)
    hd = max(float(d_ab.max()), float(d_ba.max()))
    assd = float((d_ab.sum() + d_ba.sum()) / (len(sa) + len(sb)))
    return {"mad": assd, "assd": assd, "mssd": hd, "hd": hd}


@dataclass
class ClassMetrics:
    label: int
    dice: float
    ravd_percent: float
    mad_mm: float
    assd_mm: float
    mssd_mm: float
    hd_mm: float
    flags: str = ""  # "", "vacuous", or "undefined"


@dataclass
class MetricReport:
    case_id: str
    per_class: list[ClassMetrics] = field(default_factory=list)


def evaluate_case(pred: np.ndarray, gt: np.ndarray, spacing,
                  classes, case_id: str = "case",
                  connectivity: int = 6) -> MetricReport:
    """Per-class metrics between two integer label volumes."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"extent mismatch {pred.shape} vs {gt.shape}")
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ConfigError(f"spacing must be positive, got {spacing}")
    report = MetricReport(case_id=case_id)
    for label in classes:
        pm = pred == label
        gm = gt == label
        if not pm.any() and not gm.any():
            report.per_class.append(ClassMetrics(
                label=label, dice=1.0, ravd_percent=math.nan, mad_mm=math.nan,
                assd_mm=math.nan, mssd_mm=math.nan, hd_mm=math.nan,
                flags="vacuous"))
            continue
        d = dice(gm, pm)
        rv = ravd(gm, pm)
        sd = surface_distances(
            extract_surface(gm, spacing, connectivity),
            extract_surface(pm, spacing, connectivity),
        )
        flags = ""
        if math.isnan(rv) or math.isnan(sd["hd"]):
            flags = "undefined"
        report.per_class.append(ClassMetrics(
            label=label, dice=d, ravd_percent=rv, mad_mm=sd["mad"],
            assd_mm=sd["assd"], mssd_mm=sd["mssd"], hd_mm=sd["hd"], flags=flags))
    return report


_METRIC_COLUMNS = ("dice", "ravd_percent", "mad_mm", "assd_mm", "mssd_mm", "hd_mm")
_COHORT_STATS = (
    ("Mean", lambda v: float(np.mean(v))),
    ("Median", lambda v: float(np.median(v))),
    ("25 Quartile", lambda v: float(np.percentile(v, 25))),
    ("75 Quartile", lambda v: float(np.percentile(v, 75))),
)


def cohort_summary(reports: list[MetricReport]) -> dict:
    """Per-class cohort statistics, skipping flagged (NaN) values."""
    by_class: dict[int, dict[str, list[float]]] = {}
    for rep in reports:
        for cm in rep.per_class:
            cols = by_class.setdefault(cm.label, {m: [] for m in _METRIC_COLUMNS})
            for m in _METRIC_COLUMNS:
                v = getattr(cm, m)
                if not math.isnan(v):
                    cols[m].append(v)
    summary: dict = {}
    for label, cols in sorted(by_class.items()):
        summary[label] = {}
        for m in _METRIC_COLUMNS:
            vals = cols[m]
            summary[label][m] = {
                name: (fn(vals) if vals else math.nan)
                for name, fn in _COHORT_STATS
            }
    return summary


def write_report_csv(path, reports: list[MetricReport]):
    """One row per (case, class) plus appended cohort summary rows."""
    summary = cohort_summary(reports)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "class"] + list(_METRIC_COLUMNS) + ["flags"])
        for rep in reports:
            for cm in rep.per_class:
                w.writerow([rep.case_id, cm.label]
                           + [f"{getattr(cm, m):.6g}" for m in _METRIC_COLUMNS]
                           + [cm.flags])
        for label, cols in summary.items():
            for stat_name, _ in _COHORT_STATS:
                w.writerow([stat_name, label]
                           + [f"{cols[m][stat_name]:.6g}" for m in _METRIC_COLUMNS]
                           + [""])


def clamp_score(value: float, best: float, worst: float) -> float:
    """Generic metric-to-score transform on a user-chosen [best, worst] range.

    Returns 100 at ``best`` or better, 0 at ``worst`` or beyond, linear in
    between. No challenge-specific constants are built in.
    """
    if best == worst:
        raise ValidationError("best and worst must differ")
    t = (value - worst) / (best - worst)
    return 100.0 * min(max(t, 0.0), 1.0)
