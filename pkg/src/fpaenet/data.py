"""Synthetic low-contrast lesion images, RSNA-style ingestion and splits."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .boxes import GroundTruthBox


class DatasetError(ValueError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("dataset problems:\n" + "\n".join(f"  - {i}" for i in self.issues))


class LesionPlacementError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [S, S] float32 in [0, 1]
    gts: tuple
    image_id: str

    def tensor_array(self):
        return self.image[None, None]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _background(rng, size):
    coarse = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0, mode="wrap")
    coarse /= coarse.std() + 1e-12
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0, mode="wrap")
    fine /= fine.std() + 1e-12
    return np.clip(0.4 + 0.08 * coarse + 0.03 * fine, 0.0, 1.0)


def _taper(r):
    inner = 0.6
    t = np.clip((r - inner) / (1.0 - inner), 0.0, 1.0)
    return np.where(r < 1.0, 0.5 * (1.0 + np.cos(np.pi * t)), 0.0)


def lesion_layer(size, cx, cy, a, b, theta, contrast):
    """Soft-edged elliptical bump sampled at pixel centres."""
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return contrast * _taper(r)


def ellipse_extent(a, b, theta):
    hx = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    hy = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    return hx, hy


def generate_sample(seed, size=128, lesions=(1, 3), contrast=(0.1, 0.3), lesion_size=(12.0, 40.0),
                    image_id=None, max_retries=100):
    """Deterministic image of textured background plus faint elliptical lesions.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.  The
    background is drawn before any lesion so a sample and its lesion-free
    twin (``lesions=(0, 0)``, same seed) share the same background.
    """
    rng = np.random.default_rng(seed)
    image = _background(rng, size)
    count = int(rng.integers(lesions[0], lesions[1] + 1))
    gts = []
    for _ in range(count):
        for _attempt in range(max_retries):
            a = rng.uniform(*lesion_size) / 2.0
            b = a * rng.uniform(0.6, 1.0)
            theta = rng.uniform(0.0, math.pi)
            cx, cy = rng.uniform(0, size, size=2)
            c = rng.uniform(*contrast)
            hx, hy = ellipse_extent(a, b, theta)
            if cx - hx >= 0 and cy - hy >= 0 and cx + hx <= size and cy + hy <= size:
                break
        else:
            raise LesionPlacementError(f"could not place a lesion inside a {size}px image after {max_retries} tries")
        image = image + lesion_layer(size, cx, cy, a, b, theta, c)
        gts.append(GroundTruthBox(cx - hx, cy - hy, 2 * hx, 2 * hy, 0))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if image_id is None:
        image_id = f"syn-{seed}"
    return Sample(image, tuple(gts), str(image_id))


def synthetic_dataset(cfg, size):
    """``cfg.count`` samples from a :class:`~fpaenet.config.DataConfig`."""
    return [
        generate_sample([cfg.seed, i], size, (cfg.lesions_min, cfg.lesions_max),
                        (cfg.contrast_min, cfg.contrast_max), (cfg.size_min, cfg.size_max),
                        image_id=f"syn{cfg.seed}-{i:05d}")
        for i in range(cfg.count)
    ]


# ---------------------------------------------------------------------------
# RSNA-style ingestion
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["patientId", "x", "y", "width", "height", "Target"]


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def resize_image(pixels, size):
    """8-bit grayscale array -> float32 [size, size] in [0, 1] (bilinear)."""
    h, w = pixels.shape
    if (h, w) != (size, size):
        pixels = np.asarray(Image.fromarray(pixels, mode="L").resize((size, size), Image.BILINEAR))
    return pixels.astype(np.float32) / 255.0


def load_dataset(image_dir, annotations, size, extension=".png", strict=True):
    """Load ``annotations`` rows and the matching images from ``image_dir``.

    Returns ``(manifest, samples, skipped)`` where ``skipped`` counts rows or
    images dropped in lenient mode.
    """
    issues, boxes, order = [], {}, []
    with open(annotations, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_COLUMNS:
            raise DatasetError([f"{annotations}: header must be {','.join(CSV_COLUMNS)}, got {header}"])
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                issues.append(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
                continue
            pid, *coords, target = (c.strip() for c in row)
            if not pid or target not in ("0", "1"):
                issues.append(f"line {lineno}: bad patientId or Target {target!r}")
                continue
            if pid not in boxes:
                boxes[pid] = []
                order.append(pid)
            if target == "0":
                continue
            try:
                x, y, w, h = (float(c) for c in coords)
            except ValueError:
                issues.append(f"line {lineno}: non-numeric box {coords}")
                continue
            if w <= 0 or h <= 0:
                issues.append(f"line {lineno}: non-positive box extent {w}x{h}")
                continue
            boxes[pid].append((lineno, x, y, w, h))

    samples = []
    for pid in order:
        path = os.path.join(image_dir, pid + extension)
        try:
            pixels = read_image(path)
        except (OSError, ValueError) as exc:
            issues.append(f"{pid}: cannot read image {path}: {exc}")
            continue
        nh, nw = pixels.shape
        sx, sy = size / nw, size / nh
        gts = []
        for lineno, x, y, w, h in boxes[pid]:
            if x < 0 or y < 0 or x + w > nw or y + h > nh:
                issues.append(f"line {lineno}: box ({x}, {y}, {w}, {h}) outside {nw}x{nh} image {pid}")
                continue
            gts.append(GroundTruthBox(x * sx, y * sy, w * sx, h * sy, 0))
        samples.append(Sample(resize_image(pixels, size), tuple(gts), pid))
    if issues and strict:
        raise DatasetError(issues)
    manifest = DatasetManifest(
        source={"kind": "directory", "image_dir": str(image_dir), "annotations": str(annotations)},
        ids=[s.image_id for s in samples],
    )
    return manifest, samples, len(issues)


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    source: dict
    ids: list
    test_fraction: float | None = None
    seed: int | None = None
    splits: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"source": self.source, "ids": self.ids, "test_fraction": self.test_fraction,
                           "seed": self.seed, "splits": self.splits}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def split_ids(ids, test_fraction, seed):
    """Seeded shuffle of the sorted ids, then a prefix of ``round(f n)`` for test."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    ids = sorted(ids)
    n = len(ids)
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError(f"test fraction {test_fraction} of {n} ids leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return train, test


def split_dataset(manifest, test_fraction=1019 / 6012, seed=0):
    train, test = split_ids(manifest.ids, test_fraction, seed)
    return DatasetManifest(manifest.source, list(manifest.ids), test_fraction, seed,
                           {"train": train, "test": test})


def dataset_stats(samples):
    counts = [len(s.gts) for s in samples]
    areas = [g.width * g.height for s in samples for g in s.gts]
    return {"images": len(samples), "boxes": int(np.sum(counts)) if counts else 0,
            "empty_images": int(sum(c == 0 for c in counts)),
            "mean_box_area": float(np.mean(areas)) if areas else 0.0}
