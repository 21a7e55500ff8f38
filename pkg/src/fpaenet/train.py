"""Seeded training loop, evaluation driver and run records."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import config as config_mod
from .evaluate import evaluate
from .model import Detector, predict, total_loss
from .optim import Adam

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    pass


@dataclass
class RunRecord:
    config: dict
    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    eval_report: dict | None = None
    checkpoint: str | None = None
    num_parameters: int = 0

    def append_loss(self, value):
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value}")
        self.losses.append(float(value))

    @property
    def protocol(self):
        c = self.config
        return {"lr": float(c["optim.lr"]), "batch_size": int(c["optim.batch_size"]),
                "epochs": int(c["optim.epochs"]), "iou_threshold": float(c["eval.iou_threshold"]),
                "test_fraction": float(c["data.test_fraction"])}

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def planned_steps(cfg, n):
    if cfg.optim.max_steps:
        return cfg.optim.max_steps
    return cfg.optim.epochs * math.ceil(n / cfg.optim.batch_size)


def train(cfg, samples, checkpoint_path=None, record=None, on_step=None):
    """Train a fresh :class:`Detector` on ``samples``.

    Returns ``(model, optimizer, record)``.  Aborts with :class:`NumericError`
    on the first non-finite loss.
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    model = Detector(cfg)
    oc = cfg.optim
    opt = Adam(model.named_parameters(), oc.lr, oc.beta1, oc.beta2, oc.eps)
    record = record or RunRecord(config=dict(config_mod.to_items(cfg)))
    record.num_parameters = model.num_parameters()
    rng = np.random.default_rng([cfg.seed, 3])
    cache = {}
    total = planned_steps(cfg, len(samples))
    per_epoch = math.ceil(len(samples) / oc.batch_size)
    start = time.perf_counter()
    step = 0
    while step < total:
        order = rng.permutation(len(samples))
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * oc.batch_size:(b + 1) * oc.batch_size]
            batch = [samples[i] for i in idx]
            images = np.stack([s.image for s in batch])[:, None]
            opt.zero_grad()
            loss, parts = total_loss(model, images, [s.gts for s in batch], cache, [s.image_id for s in batch])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"step {step}: non-finite loss {value} (parts {parts}, "
                                   f"images {[s.image_id for s in batch]})")
            loss.backward()
            opt.step()
            record.append_loss(value)
            step += 1
            if on_step is not None:
                on_step(step, value, parts)
        if oc.checkpoint_every_epoch and checkpoint_path:
            checkpoint.save(f"{checkpoint_path}.epoch{math.ceil(step / per_epoch)}", model, opt)
    record.wall_time = time.perf_counter() - start
    if checkpoint_path:
        checkpoint.save(checkpoint_path, model, opt)
        record.checkpoint = str(checkpoint_path)
    return model, opt, record


def evaluate_model(model, samples):
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    ec = model.cfg.eval
    images = np.stack([s.image for s in samples])
    ids = [s.image_id for s in samples]
    dets = predict(model, images, ids)
    return evaluate({i: d for i, d in zip(ids, dets)}, {s.image_id: list(s.gts) for s in samples},
                    model.cfg.head.num_classes, ec.iou_threshold, ec.interpolation)
