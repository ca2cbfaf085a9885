"""Overlap and boundary metrics for binary masks, and BraTS region composition."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

REGIONS = {
    "WT": (1, 2, 3),
    "TC": (1, 3),
    "ET": (3,),
}


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one background voxel among their 26
    neighbours; the outside of the grid counts as background."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=np.ones((3,) * mask.ndim), border_value=0)
    return mask & ~inner


def empty_sentinel(shape) -> float:
    """HD95 reported when exactly one of the masks is empty: the grid diagonal."""
    return float(np.sqrt(np.sum(np.square(shape, dtype=np.float64))))


def surface_distances(pred, gt) -> np.ndarray:
    """Pooled nearest-surface distances, pred->gt followed by gt->pred."""
    pred, gt = _pair(pred, gt)
    sp, sg = surface(pred), surface(gt)
    to_gt = ndimage.distance_transform_edt(~sg)
    to_pred = ndimage.distance_transform_edt(~sp)
    return np.concatenate([to_gt[sp], to_pred[sg]])


def hd95(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    has_p, has_g = bool(pred.any()), bool(gt.any())
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return empty_sentinel(pred.shape)
    return float(np.percentile(surface_distances(pred, gt), 95))


def compose_regions(labels) -> dict:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        bad = np.flatnonzero((labels < 0) | (labels > 3))[0]
        raise ValueError(f"label {labels.reshape(-1)[bad]} at voxel {bad} outside 0..3")
    return {name: np.isin(labels, members) for name, members in REGIONS.items()}
