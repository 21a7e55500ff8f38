"""Slow, obviously-correct reference implementations used only by the tests."""
from fractions import Fraction

import numpy as np


def raster_iou_2d(a, b, samples=1000):
    """IoU of two (x, y, w, h) boxes by counting sample points on a 2D grid."""
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[0] + a[2], b[0] + b[2])
    y1 = max(a[1] + a[3], b[1] + b[3])
    xs = x0 + (np.arange(samples) + 0.5) * (x1 - x0) / samples
    ys = y0 + (np.arange(samples) + 0.5) * (y1 - y0) / samples
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    def mask(box):
        return (xx >= box[0]) & (xx < box[0] + box[2]) & (yy >= box[1]) & (yy < box[1] + box[3])

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def raster_iou(a, b, samples=200_000):
    """Grid-counting IoU, factorised per axis.

    An axis-aligned box's pixel mask is the outer product of its x and y
    indicator vectors, so pixel counts of the intersection and of each box
    are products of 1D counts; this keeps a dense grid affordable.
    """
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[0] + a[2], b[0] + b[2])
    y1 = max(a[1] + a[3], b[1] + b[3])
    xs = x0 + (np.arange(samples) + 0.5) * (x1 - x0) / samples
    ys = y0 + (np.arange(samples) + 0.5) * (y1 - y0) / samples

    def ind(box):
        return ((xs >= box[0]) & (xs < box[0] + box[2]), (ys >= box[1]) & (ys < box[1] + box[3]))

    (ax, ay), (bx, by) = ind(a), ind(b)
    inter = np.count_nonzero(ax & bx) * np.count_nonzero(ay & by)
    union = np.count_nonzero(ax) * np.count_nonzero(ay) + np.count_nonzero(bx) * np.count_nonzero(by) - inter
    return inter / union


def plain_iou(a, b):
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / (a[2] * a[3] + b[2] * b[3] - iw * ih)


def greedy_nms(boxes, scores, ids, thr):
    """Indices kept by the textbook greedy rule, written as plain loops."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], ids[i]))
    kept = []
    for i in order:
        if all(plain_iou(boxes[i], boxes[k]) < thr for k in kept):
            kept.append(i)
    return kept


def envelope_ap(flags, num_gt):
    """All-points AP by enumerating ranks in exact rational arithmetic.

    ``flags`` are TP/FP marks already in descending score order.
    """
    tp = fp = 0
    points = []
    for f in flags:
        tp += bool(f)
        fp += not f
        points.append((Fraction(tp, num_gt), Fraction(tp, tp + fp)))
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k, (recall, _) in enumerate(points):
        best = max(p for _, p in points[k:])
        ap += (recall - prev_recall) * best
        prev_recall = recall
    return ap


def eleven_point_ap(flags, num_gt):
    tp = fp = 0
    pts = []
    for f in flags:
        tp += bool(f)
        fp += not f
        pts.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for i in range(11):
        r = i / 10
        cands = [p for rec, p in pts if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 11
