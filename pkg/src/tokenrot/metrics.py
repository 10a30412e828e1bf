"""Segmentation metrics: per-class Dice and 95th-percentile Hausdorff distance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeMismatch

#: hd95 value reported when exactly one of the two masks is empty
HD_SENTINEL = math.inf

_SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"prediction shape {np.shape(a)} != truth shape {np.shape(b)}")


def dice(pred, truth, k: int) -> float:
    """Dice overlap ``2|P & T| / (|P| + |T|)`` of class ``k``.

    Both masks empty counts as perfect agreement (1.0).
    """
    _check_shapes(pred, truth)
    p = np.asarray(pred) == k
    t = np.asarray(truth) == k
    inter = int(np.count_nonzero(p & t))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if total == 0:
        return 1.0
    return 2 * inter / total


def boundary(mask):
    """Foreground voxels with at least one 6-connected background neighbour.

    Voxels outside the array count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_NEIGHBORS, border_value=0)
    return mask & ~eroded


def surface_distances(pred_mask, truth_mask, spacing=(1.0, 1.0, 1.0)):
    """Symmetric set of boundary-to-nearest-boundary distances (both directions)."""
    _check_shapes(pred_mask, truth_mask)
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary(pred_mask)) * scale
    b = np.argwhere(boundary(truth_mask)) * scale
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return np.concatenate([d_ab, d_ba])


def hd95(pred_mask, truth_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of the symmetric surface distances.

    Returns 0.0 when both masks are empty and :data:`HD_SENTINEL` when only one is.
    """
    _check_shapes(pred_mask, truth_mask)
    p_any = bool(np.any(pred_mask))
    t_any = bool(np.any(truth_mask))
    if not p_any and not t_any:
        return 0.0
    if not (p_any and t_any):
        return HD_SENTINEL
    return float(np.percentile(surface_distances(pred_mask, truth_mask, spacing), 95))


@dataclass
class SegmentationResult:
    dice: Dict[int, float] = field(default_factory=dict)
    hd95: Dict[int, float] = field(default_factory=dict)
    pred_present: Dict[int, bool] = field(default_factory=dict)
    truth_present: Dict[int, bool] = field(default_factory=dict)

    @property
    def mean_dice(self):
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_hd95(self):
        """Mean over classes with a finite distance (nan if none)."""
        finite = [v for v in self.hd95.values() if math.isfinite(v)]
        return float(np.mean(finite)) if finite else float("nan")


def evaluate_segmentation(pred, truth, classes: Sequence[int],
                          spacing=(1.0, 1.0, 1.0)) -> SegmentationResult:
    _check_shapes(pred, truth)
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    res = SegmentationResult()
    for k in classes:
        p = pred == k
        t = truth == k
        res.dice[k] = dice(pred, truth, k)
        res.hd95[k] = hd95(p, t, spacing)
        res.pred_present[k] = bool(p.any())
        res.truth_present[k] = bool(t.any())
    return res
