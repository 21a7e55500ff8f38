"""Anchors, classification/box subnets, target assignment and losses."""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import AnchorBox, BoxError, cxcywh_to_xyxy, iou_matrix_xyxy, xywh_to_xyxy
from .config import HeadConfig
from .nn import Conv2d, Module
from .tensor import IGNORE, NEGATIVE, ShapeError, focal_loss, smooth_l1

# widest log-scale step decode_boxes will apply; keeps exp() finite in float32
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


class Anchors:
    """Flat anchor table in enumeration order: level, row, column, scale, ratio."""

    def __init__(self, boxes, levels):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.levels = np.asarray(levels, dtype=np.int64)
        self.xyxy = cxcywh_to_xyxy(self.boxes)

    def __len__(self):
        return self.boxes.shape[0]

    def __getitem__(self, i):
        cx, cy, w, h = self.boxes[i]
        return AnchorBox(float(cx), float(cy), float(w), float(h), int(self.levels[i]), int(i))


def generate_anchors(level_sizes, image_size, scales, ratios, size_factor=4.0):
    """Anchors for square levels of the given sizes (any order, enumerated as given).

    A cell of a level with stride ``s`` spawns ``len(scales) * len(ratios)``
    anchors centred at ``((col + 0.5) s, (row + 0.5) s)`` with side
    ``size_factor * s * scale`` and height/width equal to ``ratio`` at
    constant area.
    """
    shapes = []
    for scale in scales:
        for ratio in ratios:
            side = size_factor * scale
            shapes.append((side / math.sqrt(ratio), side * math.sqrt(ratio)))
    shapes = np.array(shapes, dtype=np.float64)
    blocks, levels = [], []
    for li, size in enumerate(level_sizes):
        stride = image_size / size
        centers = (np.arange(size, dtype=np.float64) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        a = len(shapes)
        block = np.empty((size, size, a, 4))
        block[..., 0] = cx[..., None]
        block[..., 1] = cy[..., None]
        block[..., 2] = shapes[:, 0] * stride
        block[..., 3] = shapes[:, 1] * stride
        blocks.append(block.reshape(-1, 4))
        levels.append(np.full(size * size * a, li, dtype=np.int64))
    return Anchors(np.concatenate(blocks), np.concatenate(levels))


class _Tower(Module):
    def __init__(self, channels, depth, out_channels, rng, dtype, bias_value):
        self.convs = [Conv2d(channels, channels, 3, rng, dtype=dtype) for _ in range(depth)]
        self.out = Conv2d(channels, out_channels, 3, rng, dtype=dtype, init="normal", std=0.01,
                          bias_value=bias_value)

    def forward(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        return self.out(x)


class DetectionHead(Module):
    """Two parallel fully convolutional subnets shared across pyramid levels."""

    def __init__(self, cfg: HeadConfig, channels, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        a = cfg.anchors_per_cell
        prior_bias = -math.log((1.0 - cfg.prior) / cfg.prior)
        self.cls_tower = _Tower(channels, cfg.depth, a * cfg.num_classes, rng, dtype, prior_bias)
        self.box_tower = _Tower(channels, cfg.depth, a * 4, rng, dtype, 0.0)

    def forward(self, pyramid):
        return subnet_forward(self, pyramid)


def build_head(cfg: HeadConfig, channels, seed, dtype=np.float32):
    return DetectionHead(cfg, channels, np.random.default_rng([int(seed), 2]), dtype)


def subnet_forward(head, pyramid):
    """Per-anchor class logits [N, M, K] and box deltas [N, M, 4]."""
    logits, deltas = [], []
    for x in pyramid:
        if x.shape[1] != head.channels:
            raise ShapeError(f"head expects {head.channels} channels, got {x.shape[1]}")
        logits.append(T.head_flatten(head.cls_tower(x), head.cfg.num_classes))
        deltas.append(T.head_flatten(head.box_tower(x), 4))
    if len(logits) == 1:
        return logits[0], deltas[0]
    return T.concat(logits, axis=1), T.concat(deltas, axis=1)


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------


def encode_boxes(gt, anchors):
    """Regression targets ``(dx, dy, dw, dh)`` of ``gt`` (x_min, y_min, w, h) against ``anchors`` (cx, cy, w, h)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(gt[..., 2:4] <= 0):
        raise BoxError("cannot encode a box with non-positive extent")
    gw, gh = gt[..., 2], gt[..., 3]
    gx = gt[..., 0] + gw / 2.0
    gy = gt[..., 1] + gh / 2.0
    ax, ay, aw, ah = (anchors[..., i] for i in range(4))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(anchors, deltas, image_size=None):
    """Inverse of :func:`encode_boxes`; clipped to ``[0, image_size]`` when given."""
    anchors = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    ax, ay, aw, ah = (anchors[..., i] for i in range(4))
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * np.exp(np.minimum(d[..., 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[..., 3], MAX_LOG_SCALE))
    x1, y1, x2, y2 = cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0
    if image_size is not None:
        x1, x2 = np.clip(x1, 0, image_size), np.clip(x2, 0, image_size)
        y1, y2 = np.clip(y1, 0, image_size), np.clip(y2, 0, image_size)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    labels: np.ndarray  # class id for positives, NEGATIVE or IGNORE
    matched_gt: np.ndarray  # gt index for positives, -1 otherwise
    targets: np.ndarray  # [M, 4] regression targets, zero off positives
    max_iou: np.ndarray

    @property
    def positive(self):
        return self.labels >= 0

    @property
    def num_positive(self):
        return int(self.positive.sum())


def _force_best_anchors(ious):
    """Give every gt its own highest-IoU anchor; contested anchors go to the higher IoU.

    A gt that loses a contest retries on its best remaining overlapping anchor.
    """
    m, g = ious.shape
    forced = {}
    pending = list(range(g))
    taken = np.zeros(m, dtype=bool)
    while pending:
        claims = {}
        for j in pending:
            col = np.where(taken, -1.0, ious[:, j])
            best = int(np.argmax(col))
            # never force a gt onto an anchor it does not overlap
            if col[best] > 0:
                claims.setdefault(best, []).append(j)
        pending = []
        for a, gts in sorted(claims.items()):
            winner = max(gts, key=lambda j: (ious[a, j], -j))
            forced[a] = winner
            taken[a] = True
            pending.extend(j for j in gts if j != winner)
        if taken.all():
            break
    return forced


def assign_targets(anchors, gts, pos_thr=0.5, neg_thr=0.4):
    """Label anchors positive/negative/ignore against ground-truth boxes.

    ``gts`` is a sequence of boxes exposing ``xywh``/``label`` or an [G, 4]
    (or [G, 5] with label) array.
    """
    m = len(anchors)
    gt_xywh, gt_labels = _gt_arrays(gts)
    labels = np.full(m, NEGATIVE, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    targets = np.zeros((m, 4), dtype=np.float64)
    if gt_xywh.shape[0] == 0:
        return Assignment(labels, matched, targets, np.zeros(m))
    ious = iou_matrix_xyxy(anchors.xyxy, xywh_to_xyxy(gt_xywh))
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(m), best_gt]
    pos = best_iou >= pos_thr
    labels[(best_iou >= neg_thr) & ~pos] = IGNORE
    matched[pos] = best_gt[pos]
    for a, j in _force_best_anchors(ious).items():
        matched[a] = j
    pos = matched >= 0
    labels[pos] = gt_labels[matched[pos]]
    targets[pos] = encode_boxes(gt_xywh[matched[pos]], anchors.boxes[pos])
    return Assignment(labels, matched, targets, best_iou)


def _gt_arrays(gts):
    if isinstance(gts, np.ndarray):
        arr = gts.reshape(-1, gts.shape[-1] if gts.size else 4)
        labels = arr[:, 4].astype(np.int64) if arr.shape[1] > 4 else np.zeros(len(arr), np.int64)
        return arr[:, :4].astype(np.float64), labels
    xywh = np.array([g.xywh for g in gts], dtype=np.float64).reshape(-1, 4)
    labels = np.array([g.label for g in gts], dtype=np.int64)
    return xywh, labels


__all__ = ["Anchors", "Assignment", "DetectionHead", "assign_targets", "build_head", "decode_boxes",
           "encode_boxes", "focal_loss", "generate_anchors", "smooth_l1", "subnet_forward"]
