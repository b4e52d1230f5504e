"""Segmentation evaluation: Dice overlap, HD95, ASSD, weighted averaging.

Masks are boolean (H, W) grids; ``spacing`` scales pixel offsets into length
units. Surface distances use 4-connectivity boundaries (pixels outside the
grid count as background) and the nearest-rank 95th percentile. HD95/ASSD are
undefined when either mask is empty and return ``nan``; callers exclude those
cases from averages (see ``mean_defined``).
"""

from __future__ import annotations

import logging
import math

import numpy as np

__all__ = [
    "dsc",
    "hd95",
    "assd",
    "boundary_points",
    "weighted_overall",
    "mean_defined",
    "evaluate_case",
]

log = logging.getLogger(__name__)


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if m.dtype != bool:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask values must be 0/1")
        m = m.astype(bool)
    return m


def dsc(pred, gt) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|); two empty masks score 1."""
    a, b = _as_mask(pred), _as_mask(gt)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def boundary_points(mask, spacing=(1.0, 1.0)) -> np.ndarray:
    """Coordinates (in length units) of foreground pixels touching background
    through a 4-neighbor; the outside of the grid counts as background."""
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(m & ~interior)
    pts = np.stack([ys * spacing[0], xs * spacing[1]], axis=1).astype(np.float64)
    return pts


def _directed_nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a``, the distance to the nearest point of ``b``."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def _nearest_rank_p95(values: np.ndarray) -> float:
    s = np.sort(values)
    rank = math.ceil(0.95 * len(s))  # nearest-rank: smallest value with cdf >= 0.95
    return float(s[rank - 1])


def hd95(pred, gt, spacing=(1.0, 1.0)) -> float:
    """95th-percentile symmetric boundary distance; ``nan`` if a mask is empty."""
    a = boundary_points(pred, spacing)
    b = boundary_points(gt, spacing)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    return max(_nearest_rank_p95(_directed_nearest(a, b)),
               _nearest_rank_p95(_directed_nearest(b, a)))


def assd(pred, gt, spacing=(1.0, 1.0)) -> float:
    """Mean nearest-surface distance pooled over both directions; ``nan`` if
    a mask is empty."""
    a = boundary_points(pred, spacing)
    b = boundary_points(gt, spacing)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    d_ab = _directed_nearest(a, b)
    d_ba = _directed_nearest(b, a)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def weighted_overall(per_site) -> float:
    """Case-count weighted mean of per-site values: sum(v*n) / sum(n)."""
    pairs = list(per_site)
    if not pairs:
        raise ValueError("no site values to average")
    values = np.array([v for v, _ in pairs], dtype=np.float64)
    weights = np.array([n for _, n in pairs], dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    return float(np.dot(values, weights) / weights.sum())


def mean_defined(values, what: str = "metric") -> float:
    """Mean of the non-nan entries; logs how many were excluded."""
    arr = np.asarray(list(values), dtype=np.float64)
    defined = arr[~np.isnan(arr)]
    n_undef = arr.size - defined.size
    if n_undef:
        log.debug("excluded %d undefined %s value(s) from average", n_undef, what)
    if defined.size == 0:
        return math.nan
    return float(defined.mean())


def evaluate_case(pred_labels, gt_labels, num_classes: int, spacing=(1.0, 1.0)):
    """Per-case (dsc, hd95, assd), each averaged over the foreground classes.

    Surface metrics are averaged over the classes where they are defined;
    ``nan`` when no class has both boundaries.
    """
    dscs, hds, asds = [], [], []
    for k in range(1, num_classes):
        p = np.asarray(pred_labels) == k
        g = np.asarray(gt_labels) == k
        dscs.append(dsc(p, g))
        hds.append(hd95(p, g, spacing))
        asds.append(assd(p, g, spacing))
    return (
        float(np.mean(dscs)),
        mean_defined(hds, "hd95"),
        mean_defined(asds, "assd"),
    )
