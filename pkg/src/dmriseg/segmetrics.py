"""Segmentation accuracy metrics and failure-detection statistics.

Surface distances use the exact Euclidean distance transform of each
mask's surface (in mm via the grid spacing); directed distances from
both masks are pooled into one list, whose 95th percentile is HD95 and
whose mean is ASSD.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.stats import rankdata

from .core import check_same_grid


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given inputs (e.g. empty mask)."""


@dataclass(frozen=True)
class SegScores:
    """Overlap and surface-distance scores for one mask pair."""

    dsc: float
    hd95: float
    assd: float

    def __post_init__(self):
        if not 0.0 <= self.dsc <= 1.0:
            raise ValueError("dsc must lie in [0, 1]")
        if self.hd95 < 0 or self.assd < 0:
            raise ValueError("distances must be >= 0")


def dsc(a, b):
    """Dice overlap 2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    check_same_grid(a, b)
    na = a.n_foreground
    nb = b.n_foreground
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def _surface_grid(mask):
    fg = mask.data
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    has_bg_neighbor = np.zeros_like(fg)
    # a foreground voxel is surface iff any 6-neighbor (or out-of-grid) is background
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
            has_bg_neighbor |= ~neighbor
    return fg & has_bg_neighbor


def surface_voxels(mask):
    """Coordinates (N, 3) of foreground voxels touching the background."""
    if mask.n_foreground == 0:
        raise UndefinedMetricError("empty mask has no surface")
    return np.argwhere(_surface_grid(mask))


def _pooled_surface_distances(a, b, spacing):
    check_same_grid(a, b)
    if a.n_foreground == 0 or b.n_foreground == 0:
        raise UndefinedMetricError("surface distances need two nonempty masks")
    if spacing is None:
        spacing = a.grid.spacing
    surf_a = _surface_grid(a)
    surf_b = _surface_grid(b)
    dist_to_b = distance_transform_edt(~surf_b, sampling=spacing)
    dist_to_a = distance_transform_edt(~surf_a, sampling=spacing)
    return np.concatenate([dist_to_b[surf_a], dist_to_a[surf_b]])


def hd95(a, b, spacing=None):
    """95th percentile (linear interpolation) of pooled surface distances, mm."""
    pooled = _pooled_surface_distances(a, b, spacing)
    return float(np.percentile(pooled, 95.0))


def assd(a, b, spacing=None):
    """Mean of the pooled symmetric surface distances, mm."""
    pooled = _pooled_surface_distances(a, b, spacing)
    return float(pooled.mean())


def evaluate_masks(a, b, spacing=None):
    """All three scores for prediction ``a`` against reference ``b``."""
    return SegScores(dsc(a, b), hd95(a, b, spacing), assd(a, b, spacing))


@dataclass(frozen=True)
class DetectionStats:
    """Confusion counts and rates for inaccuracy detection."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float

    def to_dict(self):
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def detection_stats(u_values, dsc_values, tau, dsc_cut=0.70):
    """Confusion statistics for flagging inaccurate segmentations.

    A case is truly inaccurate (positive) when its DSC is at or below
    ``dsc_cut``; it is flagged (predicted positive) when u is strictly
    above ``tau``.  Rates with a zero denominator come out as NaN.
    """
    u_values = list(u_values)
    dsc_values = list(dsc_values)
    if len(u_values) != len(dsc_values):
        raise ValueError("u and DSC lists differ in length")
    tp = fp = tn = fn = 0
    for u, d in zip(u_values, dsc_values):
        positive = d <= dsc_cut
        predicted = u > tau
        if positive and predicted:
            tp += 1
        elif positive:
            fn += 1
        elif predicted:
            fp += 1
        else:
            tn += 1
    total = tp + fp + tn + fn

    def rate(num, den):
        return num / den if den > 0 else math.nan

    return DetectionStats(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=rate(tp + tn, total),
        sensitivity=rate(tp, tp + fn),
        specificity=rate(tn, tn + fp),
    )


def spearman(x, y):
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1D of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("rank correlation undefined for constant input")
    rx = rankdata(x)
    ry = rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])
