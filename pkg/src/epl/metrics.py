"""Overlap and surface-distance metrics for label volumes (voxel units)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetric

_SIX = generate_binary_structure(3, 1)


def _masks(pred, gt, k):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred == k, gt == k


def dice_jaccard(pred, gt, k: int) -> tuple[float, float]:
    """Dice and Jaccard for class ``k``; two empty masks score (1, 1)."""
    p, g = _masks(pred, gt, k)
    inter = np.count_nonzero(p & g)
    ps, gs = np.count_nonzero(p), np.count_nonzero(g)
    if ps + gs == 0:
        return 1.0, 1.0
    return 2.0 * inter / (ps + gs), inter / (ps + gs - inter)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask voxels with a 6-neighbour outside the mask (or the volume)."""
    inner = binary_erosion(mask, structure=_SIX, border_value=0)
    return np.argwhere(mask & ~inner)


def pooled_surface_distances(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    sp, sg = surface_voxels(p), surface_voxels(g)
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return np.concatenate([d_pg, d_gp])


def surface_distances(pred, gt, k: int) -> tuple[float, float]:
    """(hd95, asd) for class ``k`` over the pooled directed distances both ways."""
    p, g = _masks(pred, gt, k)
    if not p.any() or not g.any():
        raise UndefinedMetric(f"class {k} is empty in prediction or ground truth")
    d = pooled_surface_distances(p, g)
    return float(np.percentile(d, 95)), float(d.mean())


@dataclass
class MetricReport:
    per_class: dict = field(default_factory=dict)   # class -> {dice, jaccard, hd95, asd}
    mean: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "mean": self.mean}


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(pred, gt, num_classes: int, classes=None) -> MetricReport:
    """Metrics for every foreground class (1..N-1 unless ``classes`` is given)."""
    classes = range(1, num_classes) if classes is None else classes
    report = MetricReport()
    for k in classes:
        dice, jac = dice_jaccard(pred, gt, k)
        try:
            hd95, asd = surface_distances(pred, gt, k)
        except UndefinedMetric:
            hd95 = asd = None
        report.per_class[int(k)] = {"dice": dice, "jaccard": jac, "hd95": hd95, "asd": asd}
    for key in ("dice", "jaccard", "hd95", "asd"):
        report.mean[key] = _mean_defined(r[key] for r in report.per_class.values())
    return report


def aggregate(reports) -> MetricReport:
    """Average per-volume reports; null entries are excluded from the means."""
    reports = list(reports)
    out = MetricReport()
    classes = sorted({k for r in reports for k in r.per_class})
    for k in classes:
        rows = [r.per_class[k] for r in reports if k in r.per_class]
        out.per_class[k] = {key: _mean_defined(row[key] for row in rows) for key in ("dice", "jaccard", "hd95", "asd")}
    for key in ("dice", "jaccard", "hd95", "asd"):
        out.mean[key] = _mean_defined(r.mean[key] for r in reports)
    return out
