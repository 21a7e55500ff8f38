"""Small residual backbone producing a five-level feature pyramid."""
import numpy as np

from . import tensor as T
from .config import BackboneConfig
from .nn import Conv2d, Module
from .tensor import ShapeError


class FeaturePyramid:
    """Feature maps ordered coarsest first, each level half the size of the next.

    ``levels[0]`` is X_1 (coarsest) and ``levels[-1]`` is X_5 (finest).
    """

    def __init__(self, levels):
        levels = list(levels)
        if not levels:
            raise ShapeError("a feature pyramid needs at least one level")
        check_dyadic([t.shape for t in levels])
        self.levels = levels

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self):
        return [t.shape for t in self.levels]

    @property
    def channels(self):
        return self.levels[0].shape[1]


def check_dyadic(shapes):
    n, c = shapes[0][0], shapes[0][1]
    for coarse, fine in zip(shapes, shapes[1:]):
        if fine[0] != n or fine[1] != c:
            raise ShapeError(f"pyramid levels disagree on batch/channels: {coarse} vs {fine}")
        if fine[2] != 2 * coarse[2] or fine[3] != 2 * coarse[3]:
            raise ShapeError(f"pyramid levels are not dyadic: {coarse[2:]} then {fine[2:]}")


class ResidualBlock(Module):
    """``relu(F(x) + shortcut(x))`` with ``F`` two 3x3 convolutions."""

    def __init__(self, cin, cout, stride, rng, dtype, residual_gain=0.5):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype, gain=residual_gain)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x):
        f = self.conv2(T.relu(self.conv1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return T.relu(T.add(f, s))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        stem_stride = 1 if cfg.stem_stride == 1 else 2
        self.stem = Conv2d(1, cfg.stem_channels, 3, rng, stride=stem_stride, dtype=dtype)
        first_stride = cfg.stem_stride // stem_stride
        stages = []
        cin = cfg.stem_channels
        for s in range(5):
            stride = first_stride if s == 0 else 2
            blocks = []
            for b in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(cin, cfg.channels, stride if b == 0 else 1, rng, dtype))
                cin = cfg.channels
            stages.append(_Stage(blocks))
        self.stages = stages

    def forward(self, images):
        return extract_pyramid(self, images)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def build_backbone(cfg: BackboneConfig, seed, dtype=np.float32):
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0])
    return Backbone(cfg, rng, dtype)


def extract_pyramid(backbone, images):
    size = backbone.cfg.input_size
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (size, size):
        raise ShapeError(f"backbone expects [N, 1, {size}, {size}] images, got {images.shape}")
    x = T.relu(backbone.stem(images))
    outputs = []
    for stage in backbone.stages:
        x = stage(x)
        outputs.append(x)
    return FeaturePyramid(outputs[::-1])
