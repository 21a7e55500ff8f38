"""Model/run configuration as a flat ``section.key=value`` text file.

Defaults echo the published training protocol (Adam at lr 1e-5, batch 2,
10 epochs, IoU 0.5, 1019/6012 held out for testing); everything the
protocol leaves open is a documented artifact choice.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class BackboneConfig:
    input_size: int = 128
    stem_channels: int = 16
    # total downsampling from the image to the finest pyramid level
    stem_stride: int = 4
    blocks_per_stage: int = 2
    channels: int = 32

    def validate(self):
        s = self.input_size
        if s < 32 or s & (s - 1):
            raise ConfigError(f"backbone.input_size must be a power of two >= 32, got {s}")
        if self.stem_stride not in (1, 2, 4):
            raise ConfigError(f"backbone.stem_stride must be 1, 2 or 4, got {self.stem_stride}")
        if s // (self.stem_stride * 2 ** 4) < 2:
            raise ConfigError(
                f"backbone.input_size {s} with stem_stride {self.stem_stride} leaves the coarsest level below 2x2"
            )
        for key in ("stem_channels", "blocks_per_stage", "channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"backbone.{key} must be positive")

    def level_sizes(self):
        """Spatial sizes coarsest first (X_1 .. X_5)."""
        finest = self.input_size // self.stem_stride
        return [finest // 2 ** (4 - i) for i in range(5)]


@dataclass
class NeckConfig:
    kernel_sizes: tuple = (1, 3, 5)
    new_channels: bool = True
    enhancement: bool = True
    attention: bool = True

    def validate(self):
        validate_toggles(self.new_channels, self.enhancement, self.attention)
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"neck.kernel_sizes must be odd positive integers, got {self.kernel_sizes}")


def validate_toggles(new_channels, enhancement, attention):
    if attention and not enhancement:
        raise ConfigError("neck.attention=true requires neck.enhancement=true")
    if enhancement and not new_channels:
        raise ConfigError("neck.enhancement=true requires neck.new_channels=true")


@dataclass
class HeadConfig:
    num_classes: int = 1
    scales: tuple = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    ratios: tuple = (0.5, 1.0, 2.0)
    anchor_size: float = 4.0
    depth: int = 2
    prior: float = 0.01
    alpha: float = 0.25
    gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    smooth_l1_beta: float = 1.0 / 9.0

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("head.num_classes must be >= 1")
        if not self.scales or not self.ratios or min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ConfigError("head.scales and head.ratios must be non-empty and positive")
        if not 0 < self.prior < 1:
            raise ConfigError("head.prior must lie in (0, 1)")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError("need 0 <= head.neg_iou <= head.pos_iou <= 1")
        if self.depth < 0 or self.smooth_l1_beta <= 0 or self.gamma < 0 or not 0 <= self.alpha <= 1:
            raise ConfigError("head.depth, head.smooth_l1_beta, head.gamma or head.alpha out of range")

    @property
    def anchors_per_cell(self):
        return len(self.scales) * len(self.ratios)


@dataclass
class OptimConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 10
    # when positive, overrides the epoch count with a fixed number of steps
    max_steps: int = 0
    checkpoint_every_epoch: bool = False

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("optim.lr, optim.batch_size, optim.epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("optim.beta1/beta2 must lie in [0, 1) and optim.eps > 0")


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    interpolation: str = "all_points"
    max_detections: int = 100
    pre_nms_top_k: int = 1000

    def validate(self):
        if self.interpolation not in ("all_points", "11_point"):
            raise ConfigError("eval.interpolation must be all_points or 11_point")
        if not 0 < self.iou_threshold <= 1 or not 0 < self.nms_iou <= 1:
            raise ConfigError("eval.iou_threshold and eval.nms_iou must lie in (0, 1]")
        if not 0 <= self.score_threshold < 1 or self.max_detections < 1 or self.pre_nms_top_k < 1:
            raise ConfigError("eval.score_threshold, eval.max_detections or eval.pre_nms_top_k out of range")


@dataclass
class DataConfig:
    source: str = "synthetic"
    count: int = 200
    seed: int = 0
    lesions_min: int = 1
    lesions_max: int = 3
    contrast_min: float = 0.1
    contrast_max: float = 0.3
    size_min: float = 12.0
    size_max: float = 40.0
    test_fraction: float = 1019 / 6012
    extension: str = ".png"
    strict: bool = True

    def validate(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError("data.source must be synthetic or directory")
        if self.count < 1 or not 0 <= self.lesions_min <= self.lesions_max:
            raise ConfigError("data.count must be positive and 0 <= data.lesions_min <= data.lesions_max")
        if not 0 <= self.contrast_min <= self.contrast_max or not 0 < self.size_min <= self.size_max:
            raise ConfigError("data contrast/size ranges must be ordered and positive")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)")


@dataclass
class ModelConfig:
    seed: int = 0
    dtype: str = "float32"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for section in _SECTIONS:
            getattr(self, section).validate()
        return self

    def replace(self, **flat):
        """Copy with dotted-key overrides, e.g. ``replace(**{"optim.lr": 1e-3})``."""
        items = dict(to_items(self))
        for key, value in flat.items():
            if key not in items:
                raise ConfigError(f"unknown config key {key!r}")
            items[key] = value if isinstance(value, str) else _format(value)
        return from_items(items)


_SECTIONS = ("backbone", "neck", "head", "optim", "eval", "data")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def to_items(cfg):
    yield "seed", _format(cfg.seed)
    yield "dtype", cfg.dtype
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            yield f"{section}.{f.name}", _format(getattr(obj, f.name))


def to_text(cfg):
    return "".join(f"{k}={v}\n" for k, v in to_items(cfg))


def from_items(items):
    cfg = ModelConfig()
    for key, raw in items.items():
        if key in ("seed", "dtype"):
            setattr(cfg, key, _parse(raw, getattr(cfg, key), key))
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse(raw, getattr(obj, name), key))
    return cfg.validate()


def parse_text(text):
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value
    return from_items(items)


def load(path):
    """Read a config file, or a bundled preset given as ``preset:<name>``."""
    path = str(path)
    if path.startswith("preset:"):
        return parse_text(preset_text(path.split(":", 1)[1]))
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text)


def preset_text(name):
    try:
        return resources.files("fpaenet.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"no preset named {name!r}") from exc


def diff(a, b):
    """Field-level differences between two configs as ``(key, a_value, b_value)``."""
    left, right = dict(to_items(a)), dict(to_items(b))
    return [(k, left[k], right[k]) for k in left if left[k] != right[k]]


# architecture keys that must agree between a checkpoint and an evaluation config
ARCH_PREFIXES = ("dtype", "backbone.", "neck.", "head.num_classes", "head.scales", "head.ratios",
                 "head.anchor_size", "head.depth")


def arch_diff(a, b):
    return [d for d in diff(a, b) if d[0].startswith(ARCH_PREFIXES)]

