"""Finite-difference gradient suite over every differentiable op.

Vector-valued ops are reduced to a scalar through a fixed random
projection ``sum(op(x) * R)`` so that each output coordinate carries a
distinct upstream gradient.  Everything runs in float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gradcheck import grad_check, inject_fault
from .tensor import Tensor

F64 = np.float64


def _param(arr):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=True, dtype=F64)


def _const(arr):
    return Tensor(np.asarray(arr, dtype=F64), dtype=F64)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    points: int
    passed: bool


# Each case builds (f, point) for one random draw.


def _case_conv_input(rng, stride=1, pad=1):
    w = _const(rng.standard_normal((3, 2, 3, 3)))
    b = _const(rng.standard_normal(3))
    x = _param(rng.standard_normal((2, 2, 5, 5)))
    r = rng.standard_normal((2, 3, (5 + 2 * pad - 3) // stride + 1, (5 + 2 * pad - 3) // stride + 1))
    return (lambda p: T.sum(T.mul(T.conv2d(p, w, b, stride, pad), _const(r)))), x


def _case_conv_weight(rng, stride=2, pad=1):
    x = _const(rng.standard_normal((2, 2, 6, 6)))
    w = _param(rng.standard_normal((3, 2, 3, 3)))
    b = _const(rng.standard_normal(3))
    ho = (6 + 2 * pad - 3) // stride + 1
    r = rng.standard_normal((2, 3, ho, ho))
    return (lambda p: T.sum(T.mul(T.conv2d(x, p, b, stride, pad), _const(r)))), w


def _case_conv_bias(rng):
    x = _const(rng.standard_normal((1, 2, 4, 4)))
    w = _const(rng.standard_normal((3, 2, 1, 1)))
    b = _param(rng.standard_normal(3))
    r = rng.standard_normal((1, 3, 4, 4))
    return (lambda p: T.sum(T.mul(T.conv2d(x, w, p, 1, 0), _const(r)))), b


def _elementwise(op, draw):
    def case(rng):
        x = _param(draw(rng))
        r = rng.standard_normal(op(x.detach()).shape)
        return (lambda p: T.sum(T.mul(op(p), _const(r)))), x
    return case


def _case_add(rng):
    other = _const(rng.standard_normal((3, 4)))
    r = rng.standard_normal((3, 4))
    return (lambda p: T.sum(T.mul(T.add(p, other), _const(r)))), _param(rng.standard_normal((3, 4)))


def _case_mul(rng):
    other = _const(rng.standard_normal((3, 4)))
    return (lambda p: T.sum(T.mul(p, other))), _param(rng.standard_normal((3, 4)))


def _case_softmax(rng):
    r = rng.standard_normal((2, 3))
    return (lambda p: T.sum(T.mul(T.softmax(p), _const(r)))), _param(rng.standard_normal((2, 3)))


def _case_linear(rng):
    w = _param(rng.standard_normal((2, 4)))
    x = _const(rng.standard_normal((3, 4)))
    b = _const(rng.standard_normal(2))
    r = rng.standard_normal((3, 2))
    return (lambda p: T.sum(T.mul(T.linear(x, p, b), _const(r)))), w


def _case_scale_per_sample(rng):
    x = _const(rng.standard_normal((3, 2, 2, 2)))
    r = rng.standard_normal((3, 2, 2, 2))
    return (lambda p: T.sum(T.mul(T.scale_per_sample(x, p), _const(r)))), _param(rng.standard_normal(3))


def _case_column_concat(rng):
    r = rng.standard_normal(6)

    def f(p):
        cols = [T.reshape(T.column(p, j), (2, 1)) for j in range(3)]
        return T.sum(T.mul(T.reshape(T.concat(cols[::-1], axis=1), (6,)), _const(r)))

    return f, _param(rng.standard_normal((2, 3)))


def _case_head_flatten(rng):
    r = rng.standard_normal((1, 3 * 3 * 3, 2))
    return (lambda p: T.sum(T.mul(T.head_flatten(p, 2), _const(r)))), _param(rng.standard_normal((1, 6, 3, 3)))


def _case_mean(rng):
    return (lambda p: T.scale(T.mean(T.mul(p, p)), 3.0)), _param(rng.standard_normal((2, 5)))


def _case_focal(rng):
    labels = rng.integers(-2, 1, size=(2, 6))
    return (lambda p: T.focal_loss(p, labels, 0.25, 2.0, 3.0)), _param(rng.standard_normal((2, 6, 1)) * 2)


def _case_smooth_l1(rng):
    target = rng.standard_normal((2, 5, 4))
    mask = rng.random((2, 5)) < 0.6
    pred = target + _away_from_zero(rng, target.shape, 0.02) * 0.5
    # keep every residual clear of the +-beta knee
    diff = pred - target
    near = np.abs(np.abs(diff) - 1 / 9) < 0.01
    pred = np.where(near, target + 2 * diff, pred)
    return (lambda p: T.smooth_l1(p, target, mask, 1 / 9, 2.0)), _param(pred)


def _case_chain(rng):
    w = _const(rng.standard_normal((3, 2, 3, 3)))
    return (lambda p: T.sum(T.relu(T.conv2d(p, w, None, 1, 1)))), _param(rng.standard_normal((1, 2, 5, 5)))


def _case_enhancement(rng):
    from .neck import FeatureEnhancement

    block = FeatureEnhancement(2, (1, 3), True, rng, dtype=F64)
    block.projection.weight.data[:] = rng.standard_normal(block.projection.weight.shape)
    r = rng.standard_normal((2, 2, 4, 4))
    return (lambda p: T.sum(T.mul(block(p), _const(r)))), _param(rng.standard_normal((2, 2, 4, 4)))


def _case_top_down(rng):
    from .neck import top_down_pass

    coarse = _const(rng.standard_normal((1, 2, 2, 2)))
    r = rng.standard_normal((1, 2, 4, 4))
    return (lambda p: T.sum(T.mul(top_down_pass([coarse, p], lambda x: T.scale(x, 1.5))[-1], _const(r)))), \
        _param(rng.standard_normal((1, 2, 4, 4)))


OP_CASES = {
    "conv2d.input": _case_conv_input,
    "conv2d.weight": _case_conv_weight,
    "conv2d.bias": _case_conv_bias,
    "relu": _elementwise(T.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "add": _case_add,
    "mul": _case_mul,
    "scale": _elementwise(lambda p: T.scale(p, -2.5), lambda rng: rng.standard_normal((3, 4))),
    "sigmoid": _elementwise(T.sigmoid, lambda rng: 3 * rng.standard_normal((3, 4))),
    "upsample_nearest2x": _elementwise(T.upsample_nearest2x, lambda rng: rng.standard_normal((1, 2, 2, 3))),
    "global_avg_pool": _elementwise(T.global_avg_pool, lambda rng: rng.standard_normal((2, 3, 2, 2))),
    "softmax": _case_softmax,
    "linear": _case_linear,
    "scale_per_sample": _case_scale_per_sample,
    "column+concat": _case_column_concat,
    "head_flatten": _case_head_flatten,
    "mean": _case_mean,
    "focal_loss": _case_focal,
    "smooth_l1": _case_smooth_l1,
    "conv2d->relu->sum": _case_chain,
    "enhancement": _case_enhancement,
    "top_down_pass": _case_top_down,
}


def tiny_config():
    """A float64 model small enough for per-parameter finite differences."""
    from .config import ModelConfig

    cfg = ModelConfig()
    return cfg.replace(**{
        "dtype": "float64", "backbone.input_size": 64, "backbone.stem_stride": 2,
        "backbone.stem_channels": 3, "backbone.channels": 4, "backbone.blocks_per_stage": 1,
        "neck.kernel_sizes": "1,3", "head.depth": 1, "head.scales": "1.0", "head.ratios": "0.5,1.0",
    })


def _smooth_at(f, flat, i, step, tol=1e-2):
    """True when the one-sided slopes at ``flat[i]`` agree, i.e. no kink lies within +-step."""
    orig = flat[i]
    centre = float(f().data)
    flat[i] = orig + step
    up = float(f().data)
    flat[i] = orig - step
    down = float(f().data)
    flat[i] = orig
    right, left = (up - centre) / step, (centre - down) / step
    return abs(right - left) <= tol * max(abs(right), abs(left), 1e-8)


def end_to_end_check(seed=0, n_params=20, step=1e-4):
    """Check the total detection loss against perturbations of sampled parameters.

    Coordinates whose neighbourhood contains a ReLU kink (one-sided slopes
    disagree) are skipped and redrawn; central differences are meaningless
    there.  Returns ``(max_rel_error, skipped)``.
    """
    from .data import generate_sample
    from .model import Detector, total_loss

    cfg = tiny_config()
    model = Detector(cfg)
    # attention logits must depend on the projection for a meaningful check
    rng = np.random.default_rng([seed, 11])
    for block in model.neck.enhance:
        block.projection.weight.data[:] = rng.standard_normal(block.projection.weight.shape) * 0.5
    samples = [generate_sample([seed, i], 64, (1, 2), (0.4, 0.6), (10, 24)) for i in range(2)]
    images = np.stack([s.image for s in samples])[:, None]
    gts = [s.gts for s in samples]

    def loss():
        return total_loss(model, images, gts)[0]

    named = model.named_parameters()
    offsets = np.cumsum([0] + [p.size for _, p in named])
    worst, checked, skipped = 0.0, 0, 0
    while checked < n_params:
        flat = int(rng.integers(offsets[-1]))
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = named[k][1]
        i = flat - int(offsets[k])
        if not _smooth_at(loss, p.data.reshape(-1), i, step):
            skipped += 1
            continue
        rep = grad_check(lambda _p: loss(), p, step, [i])
        worst = max(worst, rep.max_rel_error)
        checked += 1
    return worst, skipped


def run_suite(points=10, seed=0, tol=1e-3, fault=None, end_to_end=True):
    """Return ``(results, seconds)``; ``fault`` names an op whose rule is corrupted."""
    start = time.perf_counter()
    results = []

    def run_all():
        for name, case in OP_CASES.items():
            worst = 0.0
            for i in range(points):
                f, x = case(np.random.default_rng([seed, i, len(name)]))
                worst = max(worst, grad_check(f, x, 1e-4).max_rel_error)
            results.append(SuiteResult(name, worst, points, worst <= tol))
        if end_to_end:
            worst, _ = end_to_end_check(seed)
            results.append(SuiteResult("total_loss (20 sampled params)", worst, 20, worst <= tol))

    if fault:
        with inject_fault(fault):
            run_all()
    else:
        run_all()
    return results, time.perf_counter() - start


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
