"""Pure-numpy matching and ranking kernels.

Boxes are ``(x1, y1, x2, y2)`` float rows. Ranked flags mark true matches
in rank order (best first).
"""
import numpy as np


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def greedy_match(dets, gts, threshold=0.5):
    """For detections in descending score order, claim the highest-IoU
    unclaimed ground truth whose IoU exceeds ``threshold``."""
    ious = iou_matrix(dets, gts)
    out = np.full(ious.shape[0], -1, dtype=np.int64)
    claimed = np.zeros(ious.shape[1], dtype=bool)
    for i in range(ious.shape[0]):
        row = np.where(claimed, -1.0, ious[i])
        if row.size == 0:
            continue
        j = int(np.argmax(row))
        if row[j] > threshold:
            claimed[j] = True
            out[i] = j
    return out


def average_precision(flags, n_positives):
    """Mean of precision at each true-match rank, divided by all positives
    (positives never retrieved contribute zero)."""
    flags = np.asarray(flags, dtype=bool)
    if n_positives <= 0:
        return 0.0
    hits = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    return float(np.sum(hits[flags] / ranks[flags]) / n_positives)


def interpolated_ap(flags, n_positives):
    """Area under the all-point interpolated precision/recall curve."""
    flags = np.asarray(flags, dtype=bool)
    if n_positives <= 0 or flags.size == 0:
        return 0.0
    hits = np.cumsum(flags)
    prec = hits / np.arange(1, flags.size + 1)
    rec = hits / n_positives
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], rec]))
    return float(np.sum(steps * prec))
