"""Backbone + neck + heads assembled into a trainable detector."""
import numpy as np

from . import tensor as T
from .backbone import build_backbone
from .boxes import Detection
from .config import ModelConfig
from .evaluate import nms
from .heads import assign_targets, build_head, decode_boxes, generate_anchors
from .neck import build_neck
from .nn import Module
from .tensor import Tensor


class Detector(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        dtype = np.dtype(cfg.dtype)
        c = cfg.backbone.channels
        self.cfg = cfg
        self.backbone = build_backbone(cfg.backbone, cfg.seed, dtype)
        self.neck = build_neck(cfg.neck, c, c, cfg.seed, dtype)
        self.head = build_head(cfg.head, c, cfg.seed, dtype)
        self._anchors = generate_anchors(cfg.backbone.level_sizes(), cfg.backbone.input_size,
                                         cfg.head.scales, cfg.head.ratios, cfg.head.anchor_size)

    @property
    def anchors(self):
        return self._anchors

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def forward(self, images, toggles=None):
        pyramid = self.backbone(images)
        return self.head(self.neck(pyramid, toggles))

    def images_tensor(self, images):
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[:, None]
        return Tensor(arr, dtype=self.dtype)


def batch_targets(model, gts_batch, cache=None, keys=None):
    """Stack per-image assignments into label/target/mask arrays."""
    hc = model.cfg.head
    labels, targets = [], []
    for i, gts in enumerate(gts_batch):
        key = None if keys is None else keys[i]
        a = cache.get(key) if cache is not None and key is not None else None
        if a is None:
            a = assign_targets(model.anchors, gts, hc.pos_iou, hc.neg_iou)
            if cache is not None and key is not None:
                cache[key] = a
        labels.append(a.labels)
        targets.append(a.targets)
    labels = np.stack(labels)
    return labels, np.stack(targets), labels >= 0


def total_loss(model, images, gts_batch, cache=None, keys=None):
    """Focal classification loss plus smooth-L1 box loss over a batch.

    Both terms are normalised by the number of positive anchors in the batch
    (at least one).  Returns ``(loss, parts)``.
    """
    hc = model.cfg.head
    x = model.images_tensor(images)
    logits, deltas = model(x)
    labels, targets, positive = batch_targets(model, gts_batch, cache, keys)
    npos = int(positive.sum())
    norm = float(max(npos, 1))
    cls = T.focal_loss(logits, labels, hc.alpha, hc.gamma, norm)
    box = T.smooth_l1(deltas, targets, positive, hc.smooth_l1_beta, norm)
    loss = T.add(cls, box)
    return loss, {"cls": float(cls.data), "box": float(box.data), "positives": npos}


def postprocess(model, logits, deltas, image_ids):
    """Score filter, per-class NMS and top-k cut on raw head outputs."""
    ec = model.cfg.eval
    size = model.cfg.backbone.input_size
    anchors = model.anchors.boxes
    scores_all = T.sigmoid(Tensor(logits, dtype=np.float64)).data
    results = []
    for n, image_id in enumerate(image_ids):
        dets = []
        for k in range(scores_all.shape[2]):
            scores = scores_all[n, :, k]
            idx = np.flatnonzero(scores > ec.score_threshold)
            if idx.size == 0:
                continue
            order = np.lexsort((idx, -scores[idx]))[: ec.pre_nms_top_k]
            idx = idx[order]
            boxes = decode_boxes(anchors[idx], deltas[n, idx], size)
            ok = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
            cands = [Detection(tuple(float(v) for v in boxes[i]), float(scores[a]), k, image_id, int(a))
                     for i, a in enumerate(idx) if ok[i]]
            dets.extend(nms(cands, ec.nms_iou))
        dets.sort(key=lambda d: (-d.score, d.anchor_id))
        results.append(dets[: ec.max_detections])
    return results


def predict(model, images, image_ids=None, batch_size=2):
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if image_ids is None:
        image_ids = [str(i) for i in range(len(images))]
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        logits, deltas = model(model.images_tensor(chunk))
        out.extend(postprocess(model, logits.data, deltas.data, image_ids[start:start + batch_size]))
    return out
