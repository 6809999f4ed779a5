"""Evaluation metrics for classification and binary segmentation.

Conventions that the formulas do not fix by themselves:
- multi-class AUC and F1 are macro averages over the classes present in the
  ground-truth labels; a class that is never predicted contributes F1 = 0;
- AUC with single-class labels is undefined and reported as NaN (warned);
- for masks, both empty gives Dice 1 / HD95 0, exactly one empty gives
  Dice 0 / HD95 equal to the image diagonal (largest voxel-center distance);
- HD95 is the 95th percentile, linearly interpolated, of the pooled directed
  boundary distances taken in both directions.
"""

import logging

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


# ---------------------------------------------------------------------------
# classification


def roc_auc(positive, scores):
    """Trapezoidal area under the ROC curve for one binary problem.

    positive: bool array; scores: higher means more positive. Tied scores
    collapse to one ROC point, which matches the rank-statistic value.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order]
    # indices where the threshold actually changes
    distinct = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(p)[cut]
    fp = np.cumsum(~p)[cut]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return float(_trapezoid(tpr, fpr))


def classification_metrics(labels, probabilities):
    """ACC, macro AUC, macro F1 plus per-class values.

    labels: int array [N]; probabilities: [N, C] rows summing to 1 (1e-5).
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("labels [N] and probabilities [N, C] expected")
    if labels.size == 0:
        raise ValueError("no samples to score")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-5:
        raise ValueError("probability rows must sum to 1 within 1e-5")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label outside probability columns")

    preds = probs.argmax(axis=1)
    acc = float((preds == labels).mean())
    classes = np.unique(labels)

    f1_per_class = []
    for c in classes:
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        f1_per_class.append(2 * tp / denom if denom else 0.0)
    f1 = float(np.mean(f1_per_class))

    if classes.size < 2:
        log.warning("AUC undefined for single-class labels; reporting NaN")
        auc = float("nan")
        auc_per_class = [float("nan")] * classes.size
    else:
        auc_per_class = [roc_auc(labels == c, probs[:, c]) for c in classes]
        auc = float(np.mean(auc_per_class))

    return {"acc": acc, "auc": auc, "f1": f1,
            "classes": classes.tolist(),
            "auc_per_class": [float(v) for v in auc_per_class],
            "f1_per_class": [float(v) for v in f1_per_class]}


# ---------------------------------------------------------------------------
# segmentation


def _as_mask(x, name):
    arr = np.asarray(x)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def _spacing_vector(spacing, ndim):
    s = np.asarray(spacing, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(ndim, float(s))
    if s.shape != (ndim,) or (s <= 0).any():
        raise ValueError("spacing must be a positive scalar or per-axis tuple")
    return s


def dice(pred, gt):
    """2|P∩G| / (|P|+|G|); defined as 1.0 when both masks are empty."""
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary_voxels(mask):
    """Indices [K, ndim] of mask voxels with a missing face neighbor.

    Out-of-bounds counts as background, so voxels on the array edge are
    boundary whenever they are foreground.
    """
    m = _as_mask(mask, "mask")
    interior = m.copy()
    for ax in range(m.ndim):
        before = np.zeros_like(m)
        after = np.zeros_like(m)
        src = [slice(None)] * m.ndim
        dst = [slice(None)] * m.ndim
        src[ax] = slice(1, None)
        dst[ax] = slice(None, -1)
        before[tuple(dst)] = m[tuple(src)]
        after[tuple(src)] = m[tuple(dst)]
        interior &= before & after
    return np.argwhere(m & ~interior)


def hd95(pred, gt, spacing=1):
    """95th percentile of pooled two-way boundary distances (both nonempty)."""
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise ValueError("hd95 needs two nonempty masks")
    s = _spacing_vector(spacing, p.ndim)
    bp = boundary_voxels(p).astype(np.float64) * s
    bg = boundary_voxels(g).astype(np.float64) * s
    d2 = kernels.pairwise_sqdist(np.ascontiguousarray(bp),
                                 np.ascontiguousarray(bg))
    forward = np.sqrt(d2.min(axis=1))
    backward = np.sqrt(d2.min(axis=0))
    pooled = np.concatenate([forward, backward])
    return float(np.percentile(pooled, 95))


def image_diagonal(shape, spacing=1):
    s = _spacing_vector(spacing, len(shape))
    extents = (np.asarray(shape, dtype=np.float64) - 1.0) * s
    return float(np.sqrt((extents ** 2).sum()))


def segmentation_metrics(pred_mask, gt_mask, spacing=1):
    """Dice and HD95 for one foreground class, with the empty-mask rules."""
    p = _as_mask(pred_mask, "pred_mask")
    g = _as_mask(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    p_empty = not p.any()
    g_empty = not g.any()
    if p_empty and g_empty:
        return {"dice": 1.0, "hd95": 0.0}
    if p_empty or g_empty:
        return {"dice": 0.0, "hd95": image_diagonal(p.shape, spacing)}
    return {"dice": dice(p, g), "hd95": hd95(p, g, spacing)}
