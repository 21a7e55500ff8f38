"""Axis-aligned box types and overlap geometry.

Boxes travel as ``(x_min, y_min, width, height)`` in image pixels unless a
function name says otherwise; anchors are stored as ``(cx, cy, w, h)``.
"""
from dataclasses import dataclass

import numpy as np


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthBox:
    x_min: float
    y_min: float
    width: float
    height: float
    label: int = 0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise BoxError(f"ground-truth box needs positive extent, got {self.width}x{self.height}")

    @property
    def xywh(self):
        return (self.x_min, self.y_min, self.width, self.height)


@dataclass(frozen=True)
class AnchorBox:
    cx: float
    cy: float
    width: float
    height: float
    level: int
    anchor_id: int


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float
    label: int = 0
    image_id: str = ""
    anchor_id: int = -1

    def to_dict(self):
        return {"image_id": self.image_id, "label": self.label, "score": float(self.score),
                "box": [float(v) for v in self.box], "anchor_id": int(self.anchor_id)}


def xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:4]], axis=-1)


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def iou(a, b):
    """IoU of two ``(x_min, y_min, w, h)`` boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise BoxError(f"iou needs positive extents, got {a} and {b}")
    ax2, ay2, bx2, by2 = ax + aw, ay + ah, bx + bw, by + bh
    iw = min(ax2, bx2) - max(ax, bx)
    ih = min(ay2, by2) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners, like the intersection, so iou(a, a) is exactly 1
    return inter / ((ax2 - ax) * (ay2 - ay) + (bx2 - bx) * (by2 - by) - inter)


def iou_matrix_xyxy(a, b):
    """Pairwise IoU between [M,4] and [G,4] corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
