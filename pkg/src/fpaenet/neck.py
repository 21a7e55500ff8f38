"""Dual top-down pyramid neck with attention-weighted feature enhancement.

The first top-down channel is the standard FPN recursion
``H1_i = phi_i(X_i) + up(H1_{i+1})`` run from the coarsest level.  Each of
its outputs is passed through a multi-kernel enhancement block whose branch
maps are mixed by softmax attention weights and added back residually; the
enhanced maps feed a second top-down channel with its own laterals ``psi``.
"""
import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, check_dyadic
from .config import ConfigError, NeckConfig, validate_toggles
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError


def top_down_pass(levels, lateral):
    """Coarse-to-fine recursion over ``levels`` (coarsest first).

    ``lateral`` is one callable or a per-level sequence of callables.
    """
    levels = list(levels)
    if not levels:
        raise ShapeError("top_down_pass needs at least one level")
    check_dyadic([t.shape for t in levels])
    laterals = list(lateral) if isinstance(lateral, (list, tuple)) else [lateral] * len(levels)
    if len(laterals) != len(levels):
        raise ShapeError(f"{len(laterals)} lateral transforms for {len(levels)} levels")
    outputs, prev = [], None
    for x, lat in zip(levels, laterals):
        y = lat(x)
        if prev is not None:
            y = T.add(y, T.upsample_nearest2x(prev))
        outputs.append(y)
        prev = y
    return outputs


def attention_weights(logits):
    """Branch weights ``softmax(A)`` over the last axis of ``A`` [N, B]."""
    return T.softmax(logits)


def fuse(h, branch_maps, weights=None):
    """``h + sum_b w_b * e_b``; uniform ``1/B`` weights when ``weights`` is None."""
    for e in branch_maps:
        if e.shape != h.shape:
            raise ShapeError(f"branch map {e.shape} does not match lateral input {h.shape}")
    b = len(branch_maps)
    if weights is None:
        mixed = branch_maps[0]
        for e in branch_maps[1:]:
            mixed = T.add(mixed, e)
        return T.add(h, T.scale(mixed, 1.0 / b))
    if weights.shape != (h.shape[0], b):
        raise ShapeError(f"attention weights {weights.shape} do not match {b} branches")
    out = h
    for j, e in enumerate(branch_maps):
        out = T.add(out, T.scale_per_sample(e, T.column(weights, j)))
    return out


class FeatureEnhancement(Module):
    """Parallel same-padding convolutions of different kernel sizes."""

    def __init__(self, channels, kernel_sizes, attention, rng, dtype=np.float32):
        self.channels = channels
        self.branches = [Conv2d(channels, channels, k, rng, dtype=dtype, gain=0.5) for k in kernel_sizes]
        # one projection shared by all branches: pooled C-vector -> scalar logit
        self.projection = Linear(channels, 1, rng, dtype=dtype, std=0.01) if attention else None

    def branch_maps(self, h):
        if h.shape[1] != self.channels:
            raise ShapeError(f"enhancement expects {self.channels} channels, got {h.shape[1]}")
        return [branch(h) for branch in self.branches]

    def logits(self, branch_maps):
        per_branch = [self.projection(T.global_avg_pool(e)) for e in branch_maps]
        return T.concat(per_branch, axis=1)

    def forward(self, h, attention=True):
        maps = self.branch_maps(h)
        if attention:
            if self.projection is None:
                raise ConfigError("this enhancement block was built without attention")
            return fuse(h, maps, attention_weights(self.logits(maps)))
        return fuse(h, maps, None)


class Neck(Module):
    def __init__(self, cfg: NeckConfig, in_channels, channels, rng, num_levels=5, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.phi = [Conv2d(in_channels, channels, 1, rng, padding=0, dtype=dtype) for _ in range(num_levels)]
        self.psi = ([Conv2d(channels, channels, 1, rng, padding=0, dtype=dtype) for _ in range(num_levels)]
                    if cfg.new_channels else [])
        self.enhance = ([FeatureEnhancement(channels, cfg.kernel_sizes, cfg.attention, rng, dtype)
                         for _ in range(num_levels)] if cfg.enhancement else [])

    def forward(self, pyramid, toggles=None):
        return neck_forward(self, pyramid, toggles)


def build_neck(cfg: NeckConfig, in_channels, channels, seed, dtype=np.float32):
    rng = np.random.default_rng([int(seed), 1])
    return Neck(cfg, in_channels, channels, rng, dtype=dtype)


def neck_forward(neck, pyramid, toggles=None):
    """Run the neck; ``toggles`` may switch off parts that were built.

    ``toggles`` is ``(new_channels, enhancement, attention)``; the default is
    the neck's own config.
    """
    cfg = neck.cfg
    new_channels, enhancement, attention = toggles or (cfg.new_channels, cfg.enhancement, cfg.attention)
    validate_toggles(new_channels, enhancement, attention)
    built = (cfg.new_channels, cfg.enhancement, cfg.attention)
    if any(want and not have for want, have in zip((new_channels, enhancement, attention), built)):
        raise ConfigError(f"toggles {(new_channels, enhancement, attention)} exceed the built neck {built}")
    levels = list(pyramid)
    h1 = top_down_pass(levels, neck.phi)
    if not new_channels:
        return FeaturePyramid(h1)
    if enhancement:
        lateral_in = [block(h, attention=attention) for block, h in zip(neck.enhance, h1)]
    else:
        lateral_in = h1
    return FeaturePyramid(top_down_pass(lateral_in, neck.psi))
