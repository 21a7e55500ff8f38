"""Post-processing and the detection evaluation protocol.

Detections are matched greedily to ground truth at a fixed IoU threshold,
precision ``TP / (TP + FP)`` and recall are accumulated down the global
score ranking, and AP is the area under the precision envelope.  mAP is the
plain mean of per-class APs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .boxes import Detection, iou, iou_matrix_xyxy, xywh_to_xyxy


class EvaluationError(ValueError):
    pass


def nms(dets, iou_thr=0.5):
    """Greedy NMS; priority is score descending, then lower anchor id."""
    dets = list(dets)
    if not dets:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    ids = np.array([d.anchor_id for d in dets], dtype=np.int64)
    order = np.lexsort((ids, -scores))
    boxes = xywh_to_xyxy(np.array([dets[i].box for i in order], dtype=np.float64))
    keep = _kernels.nms_sorted(boxes, iou_thr)
    return [dets[order[k]] for k in keep]


def match_detections(dets, gts, iou_thr=0.5):
    """TP/FP flag per detection of one image and class, in descending score order.

    Returns ``(flags, scores)`` with detections sorted the same way.
    """
    dets = sorted(dets, key=lambda d: (-d.score, d.anchor_id))
    scores = np.array([d.score for d in dets], dtype=np.float64)
    flags = np.zeros(len(dets), dtype=bool)
    if not dets or len(gts) == 0:
        return flags, scores
    gt_boxes = np.array([g.xywh if hasattr(g, "xywh") else g for g in gts], dtype=np.float64)
    ious = iou_matrix_xyxy(xywh_to_xyxy(np.array([d.box for d in dets])), xywh_to_xyxy(gt_boxes))
    matched = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(dets)):
        cand = np.where(matched, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            matched[j] = True
            flags[i] = True
    return flags, scores


def precision_recall(flags, scores, num_gt):
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    f = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / num_gt
    return precision, recall


def average_precision(flags, scores, num_gt, interpolation="all_points"):
    """AP from pooled TP/FP flags and scores over ``num_gt`` ground-truth boxes."""
    if num_gt < 1:
        raise EvaluationError("average precision is undefined without ground-truth boxes")
    if len(flags) == 0:
        return 0.0
    precision, recall = precision_recall(flags, scores, num_gt)
    if interpolation == "11_point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= r - 1e-12]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    if interpolation != "all_points":
        raise EvaluationError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # envelope: precision at recall r becomes the best precision at recall >= r
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def mean_ap(aps):
    aps = list(aps)
    if not aps:
        raise EvaluationError("mAP needs at least one class")
    return math.fsum(aps) / len(aps)


@dataclass
class EvalReport:
    num_classes: int
    ap: list
    map: float
    precision_points: list
    recall_points: list
    tp: int
    fp: int
    iou_threshold: float
    interpolation: str = "all_points"
    num_gt: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def consistent(self):
        return abs(mean_ap(self.ap) - self.map) <= 1e-12


def evaluate(detections, ground_truth, num_classes=1, iou_thr=0.5, interpolation="all_points"):
    """Pool per-image matches into an :class:`EvalReport`.

    ``detections`` and ``ground_truth`` map image id to lists of
    :class:`Detection` and ground-truth boxes respectively.
    """
    if not ground_truth:
        raise EvaluationError("cannot evaluate an empty dataset")
    aps, num_gts, pr_p, pr_r = [], [], [], []
    tp_total = fp_total = 0
    for k in range(num_classes):
        flags_all, scores_all, n_gt = [], [], 0
        for image_id in sorted(ground_truth):
            gts = [g for g in ground_truth[image_id] if getattr(g, "label", 0) == k]
            dets = [d for d in detections.get(image_id, []) if d.label == k]
            n_gt += len(gts)
            flags, scores = match_detections(dets, gts, iou_thr)
            flags_all.append(flags)
            scores_all.append(scores)
        flags = np.concatenate(flags_all) if flags_all else np.zeros(0, bool)
        scores = np.concatenate(scores_all) if scores_all else np.zeros(0)
        aps.append(average_precision(flags, scores, n_gt, interpolation))
        num_gts.append(n_gt)
        tp_total += int(flags.sum())
        fp_total += int((~flags).sum())
        if flags.size:
            p, r = precision_recall(flags, scores, n_gt)
            pr_p.append([float(v) for v in p])
            pr_r.append([float(v) for v in r])
        else:
            pr_p.append([])
            pr_r.append([])
    return EvalReport(num_classes=num_classes, ap=aps, map=mean_ap(aps), precision_points=pr_p,
                      recall_points=pr_r, tp=tp_total, fp=fp_total, iou_threshold=iou_thr,
                      interpolation=interpolation, num_gt=num_gts)


__all__ = ["Detection", "EvalReport", "EvaluationError", "average_precision", "evaluate", "iou",
           "match_detections", "mean_ap", "nms", "precision_recall"]
