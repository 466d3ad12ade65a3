"""Datasets: a synthetic multi-scale shape task and the CIFAR-10 binary format.

Synthetic images
----------------
Each canvas holds one *target* shape drawn in a warm colour and zero or more
distractor shapes in cool colours, over a noisy dark background.  The label
is the target's shape class.  Targets are drawn into one of three scale
strata by their rendered pixel area, as a fraction of the canvas area:

    small   area <  4%
    medium  4% <= area < 12%
    large   area >= 12%

Sizes are drawn by rejection sampling until the measured area lands in the
requested stratum, and every sample keeps a generation record from which the
exact target mask (and hence its stratum) can be re-rendered.  The target is
drawn last so its mask is never occluded.

CIFAR-10
--------
Binary batches hold records of one label byte followed by 3072 pixel bytes
(R, G and B planes, each 32x32 row-major).  Pixels are scaled to [0, 1] and
normalized per channel with the training-set statistics
mean = (0.4914, 0.4822, 0.4465), std = (0.2470, 0.2435, 0.2616).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError

STRATA = ("small", "medium", "large")
AREA_THRESHOLDS = (0.04, 0.12)
SHAPES = ("square", "circle", "triangle", "cross")
MIN_SIDE = 4
MAX_REJECTIONS = 1000

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.25, 0.25, 0.25)


@dataclass
class Dataset:
    """uint8 images in NCHW plus labels; ``batch`` returns normalized float32."""

    images: np.ndarray
    labels: np.ndarray
    mean: tuple = SYNTHETIC_MEAN
    std: tuple = SYNTHETIC_STD
    strata: Optional[np.ndarray] = None  # index into STRATA, synthetic only
    records: Optional[list] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def batch(self, idx) -> np.ndarray:
        x = self.images[idx].astype(np.float32) / np.float32(255)
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, 3, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, 3, 1, 1)
        return (x - mean) / std

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx], self.labels[idx], self.mean, self.std,
            None if self.strata is None else self.strata[idx],
            None if self.records is None else [self.records[i] for i in idx],
        )


# -- synthetic generator -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    canvas_size: int = 32
    shapes_per_image: tuple = (1, 3)  # inclusive range, target included
    scale_distribution: tuple = (1 / 3, 1 / 3, 1 / 3)  # small, medium, large
    noise: float = 0.05
    train_samples: int = 2000
    test_samples: int = 600
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must lie in [2, {len(SHAPES)}], got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"shapes_per_image must be a range (lo, hi) with 1 <= lo <= hi, got {self.shapes_per_image}")
        dist = np.asarray(self.scale_distribution, dtype=float)
        if dist.shape != (3,) or (dist < 0).any() or not np.isclose(dist.sum(), 1.0):
            raise ConfigError(f"scale_distribution must be 3 non-negative fractions summing to 1, got {self.scale_distribution}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if min(self.train_samples, self.test_samples) < 0:
            raise ConfigError("sample counts must be non-negative")
        for s, p in zip(range(3), dist):
            if p > 0 and not _side_range(self.canvas_size, s):
                raise ConfigError(
                    f"canvas {self.canvas_size}px is too small for {STRATA[s]} objects "
                    f"(sides must fit between {MIN_SIDE}px and the canvas)"
                )


@dataclass(frozen=True)
class ShapeRecord:
    shape: int  # index into SHAPES
    cy: float
    cx: float
    side: int
    color: tuple


@dataclass(frozen=True)
class SampleRecord:
    target: ShapeRecord
    distractors: tuple
    area: int
    stratum: int


def shape_mask(record: ShapeRecord, canvas: int) -> np.ndarray:
    """Binary mask of one shape; pixel centres sit at integer + 0.5."""
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    dy, dx = yy - record.cy, xx - record.cx
    half = record.side / 2
    name = SHAPES[record.shape]
    if name == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "circle":
        return dx * dx + dy * dy <= half * half
    if name == "triangle":
        # apex up: the half-width grows linearly from 0 at the top edge to ``half``
        inside_y = (dy >= -half) & (dy <= half)
        return inside_y & (np.abs(dx) <= (dy + half) / 2)
    arm = record.side / 6
    in_box = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    return in_box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))


def stratum_of(area: int, canvas: int) -> int:
    frac = area / (canvas * canvas)
    return int(np.searchsorted(AREA_THRESHOLDS, frac, side="right"))


def _side_range(canvas: int, stratum: int) -> tuple[int, int] | None:
    """Candidate side lengths for a stratum; fill factors span ~0.4 (cross) to 1 (square)."""
    bounds = (0.0,) + AREA_THRESHOLDS + (1.0,)
    lo_area, hi_area = bounds[stratum] * canvas * canvas, bounds[stratum + 1] * canvas * canvas
    lo = max(MIN_SIDE, int(np.floor(np.sqrt(lo_area))))
    hi = min(canvas - 2, int(np.ceil(np.sqrt(hi_area / 0.4))))
    return (lo, hi) if lo <= hi else None


def _warm(rng: np.random.Generator) -> tuple:
    return (int(rng.integers(200, 256)), int(rng.integers(60, 200)), int(rng.integers(0, 60)))


def _cool(rng: np.random.Generator) -> tuple:
    return (int(rng.integers(0, 60)), int(rng.integers(60, 200)), int(rng.integers(150, 256)))


def _place(rng: np.random.Generator, shape: int, side: int, canvas: int, color: tuple) -> ShapeRecord:
    half = side / 2
    cy = float(rng.uniform(half, canvas - half))
    cx = float(rng.uniform(half, canvas - half))
    return ShapeRecord(shape, cy, cx, side, color)


def _sample(rng: np.random.Generator, spec: SyntheticSpec, label: int, stratum: int) -> tuple[np.ndarray, SampleRecord]:
    canvas = spec.canvas_size
    lo, hi = _side_range(canvas, stratum)
    for _ in range(MAX_REJECTIONS):
        target = _place(rng, label, int(rng.integers(lo, hi + 1)), canvas, _warm(rng))
        mask = shape_mask(target, canvas)
        area = int(mask.sum())
        if stratum_of(area, canvas) == stratum:
            break
    else:
        raise ConfigError(f"could not draw a {STRATA[stratum]} object on a {canvas}px canvas")

    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    d_lo, d_hi = MIN_SIDE, max(MIN_SIDE, canvas // 3)
    distractors = tuple(
        _place(rng, int(rng.integers(0, spec.num_classes)), int(rng.integers(d_lo, d_hi + 1)), canvas, _cool(rng))
        for _ in range(n_shapes - 1)
    )
    base = rng.uniform(0.05, 0.25)
    img = base + spec.noise * rng.standard_normal((3, canvas, canvas))
    for rec in distractors + (target,):
        m = shape_mask(rec, canvas)
        img[:, m] = (np.asarray(rec.color, dtype=float) / 255.0)[:, None]
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img, SampleRecord(target, distractors, area, stratum)


def _split(rng: np.random.Generator, spec: SyntheticSpec, count: int) -> Dataset:
    canvas = spec.canvas_size
    images = np.empty((count, 3, canvas, canvas), dtype=np.uint8)
    labels = rng.integers(0, spec.num_classes, size=count)
    strata = rng.choice(3, size=count, p=np.asarray(spec.scale_distribution, dtype=float))
    records = []
    for i in range(count):
        images[i], rec = _sample(rng, spec, int(labels[i]), int(strata[i]))
        records.append(rec)
    return Dataset(images, labels.astype(np.int64), SYNTHETIC_MEAN, SYNTHETIC_STD, strata.astype(np.int64), records)


@dataclass
class SplitData:
    train: Dataset
    test: Dataset


def generate_synthetic(spec: SyntheticSpec) -> SplitData:
    """Deterministic in ``spec.seed``: the same spec yields byte-identical arrays."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train = _split(rng, spec, spec.train_samples)
    test = _split(rng, spec, spec.test_samples)
    return SplitData(train, test)


def remeasure_strata(dataset: Dataset) -> np.ndarray:
    """Recompute stratum tags from the generation records alone."""
    canvas = dataset.resolution
    return np.array([stratum_of(int(shape_mask(r.target, canvas).sum()), canvas) for r in dataset.records],
                    dtype=np.int64)


# -- CIFAR-10 -----------------------------------------------------------------------


def read_cifar_batch(path, records: Optional[int] = CIFAR_RECORDS_PER_FILE) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (uint8 NCHW images, int64 labels).

    ``records=None`` accepts any whole number of records (handy for crafted
    test files); otherwise the file must hold exactly that many.
    """
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if records is not None and raw.size != records * CIFAR_RECORD:
        raise FormatError(f"{path}: {raw.size} bytes, expected {records * CIFAR_RECORD} ({records} records of {CIFAR_RECORD})")
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: {raw.size} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record")
    table = raw.reshape(-1, CIFAR_RECORD)
    labels = table[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside 0..9")
    images = table[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def load_cifar10(directory) -> SplitData:
    directory = Path(directory)
    parts = [read_cifar_batch(directory / f"data_batch_{i}.bin") for i in range(1, 6)]
    test_x, test_y = read_cifar_batch(directory / "test_batch.bin")
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), CIFAR_MEAN, CIFAR_STD)
    return SplitData(train, Dataset(test_x, test_y, CIFAR_MEAN, CIFAR_STD))


# -- augmentation -------------------------------------------------------------------


def augment(x: np.ndarray, rng: np.random.Generator, pad_crop: bool = True, pad: int = 4) -> np.ndarray:
    """Random horizontal flip, plus zero-padded random crops when ``pad_crop``."""
    n, _, h, w = x.shape
    out = x.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    if pad_crop:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out
