"""Datasets, scenario splits and batching.

On-disk format is the CIFAR-100 binary layout: per record one coarse-label
byte, one fine-label byte, then ``C*S*S`` pixel bytes, channel-major and
row-major within a channel. CIFAR-100 itself has ``C=3, S=32`` (3074-byte
records); synthetic caches use the same layout with their own side length.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_CLASSES = 100
CIFAR_TRAIN_RECORDS = 50_000
CIFAR_TEST_RECORDS = 10_000

CIFAR_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR_STD = (0.2673, 0.2564, 0.2762)


class DataError(Exception):
    pass


def record_size(image_side: int = CIFAR_SIDE, channels: int = CIFAR_CHANNELS) -> int:
    return 2 + channels * image_side * image_side


@dataclass
class LabeledImageSet:
    images: np.ndarray  # uint8 [n, C, S, S]
    labels: np.ndarray  # int64 [n]
    split: str = "train"
    class_count: int = CIFAR_CLASSES
    coarse: np.ndarray | None = None  # CIFAR superclass byte, kept for byte-exact rewrites

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_side(self) -> int:
        return self.images.shape[-1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def read_records(path, image_side: int = CIFAR_SIDE, channels: int = CIFAR_CHANNELS,
                 expected: int | None = None, split: str = "train",
                 class_count: int = CIFAR_CLASSES) -> LabeledImageSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing data file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    rsize = record_size(image_side, channels)
    if raw.size == 0 or raw.size % rsize:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {rsize}-byte record")
    recs = raw.reshape(-1, rsize)
    if expected is not None and len(recs) != expected:
        raise DataError(f"{path}: expected {expected} records, found {len(recs)}")
    labels = recs[:, 1].astype(np.int64)
    if labels.max() >= class_count:
        raise DataError(f"{path}: fine label {labels.max()} >= {class_count}")
    images = recs[:, 2:].reshape(-1, channels, image_side, image_side).copy()
    return LabeledImageSet(images, labels, split, class_count, coarse=recs[:, 0].copy())


def write_records(path, dataset: LabeledImageSet, coarse: np.ndarray | None = None) -> None:
    n = len(dataset)
    c, s = dataset.images.shape[1], dataset.images.shape[-1]
    out = np.empty((n, record_size(s, c)), dtype=np.uint8)
    if coarse is None:
        coarse = dataset.coarse
    out[:, 0] = 0 if coarse is None else coarse
    out[:, 1] = dataset.labels
    out[:, 2:] = dataset.images.reshape(n, -1)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    out.tofile(tmp)
    os.replace(tmp, path)


def load_cifar100_binary(train_path, test_path) -> tuple[LabeledImageSet, LabeledImageSet]:
    train = read_records(train_path, expected=CIFAR_TRAIN_RECORDS, split="train")
    test = read_records(test_path, expected=CIFAR_TEST_RECORDS, split="test")
    return train, test


def make_synthetic(class_count: int, per_class: int, image_side: int = 16, seed: int = 0,
                   split: str = "train", channels: int = 3) -> LabeledImageSet:
    """Class-conditional colour blobs over a noisy grey background.

    Each class owns a blob centre, width and colour (fixed by ``seed``); every
    image jitters them and adds pixel noise (drawn from ``seed`` and ``split``),
    so train and test splits share classes but not samples.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    s = image_side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    split_code = {"train": 0, "test": 1}.get(split, 2)
    images = np.empty((class_count * per_class, channels, s, s), dtype=np.uint8)
    labels = np.repeat(np.arange(class_count), per_class)
    for c in range(class_count):
        proto = np.random.default_rng([seed, c])
        cy, cx = proto.uniform(0.25 * s, 0.75 * s, size=2)
        width = proto.uniform(0.12, 0.22) * s
        hue = proto.uniform(0.0, 1.0)
        colour = _hue_colour(hue, proto.uniform(0.6, 1.0), proto.uniform(0.6, 1.0), channels)
        rng = np.random.default_rng([seed, split_code, c])
        for k in range(per_class):
            jy, jx = rng.normal(0.0, 0.06 * s, size=2)
            blob = np.exp(-((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2 * width ** 2))
            bg = rng.uniform(0.2, 0.6)
            col = np.clip(colour + rng.normal(0.0, 0.1, size=channels), 0.0, 1.0)
            img = bg + blob[None] * (col[:, None, None] - bg)
            img += rng.normal(0.0, 0.12, size=img.shape)
            images[c * per_class + k] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels, split, class_count)


def _hue_colour(hue: float, sat: float, val: float, channels: int) -> np.ndarray:
    rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    if channels == 3:
        return rgb
    return np.resize(rgb, channels) if channels > 1 else rgb.mean(keepdims=True)


def normalize(images: np.ndarray, mean: Sequence[float] = CIFAR_MEAN, std: Sequence[float] = CIFAR_STD,
              dtype=np.float32) -> np.ndarray:
    """Scale uint8 pixels to [0, 1] then standardise per channel."""
    images = np.asarray(images)
    c = images.shape[-3]
    m = np.asarray(mean, dtype=np.float64).reshape(c, 1, 1)
    sd = np.asarray(std, dtype=np.float64).reshape(c, 1, 1)
    return ((images.astype(np.float64) / 255.0 - m) / sd).astype(dtype)


def denormalize(x: np.ndarray, mean: Sequence[float] = CIFAR_MEAN, std: Sequence[float] = CIFAR_STD) -> np.ndarray:
    c = x.shape[-3]
    m = np.asarray(mean, dtype=np.float64).reshape(c, 1, 1)
    sd = np.asarray(std, dtype=np.float64).reshape(c, 1, 1)
    return np.clip(np.rint((x.astype(np.float64) * sd + m) * 255.0), 0, 255).astype(np.uint8)


# -- scenarios --------------------------------------------------------------

PROTOCOLS = {
    "b0-5": (0, [20] * 5),
    "b0-10": (0, [10] * 10),
    "b50-5": (50, [10] * 5),
    "b50-10": (50, [5] * 10),
}


@dataclass(frozen=True)
class ScenarioSpec:
    initial_classes: int
    classes_per_step: tuple[int, ...]
    class_order: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        total = len(self.class_order)
        if sorted(self.class_order) != list(range(total)):
            raise ValueError("class_order must be a permutation of 0..K-1")
        if self.initial_classes < 0 or any(n < 1 for n in self.classes_per_step):
            raise ValueError("class counts must be positive")
        if self.initial_classes + sum(self.classes_per_step) != total:
            raise ValueError(
                f"initial {self.initial_classes} + steps {sum(self.classes_per_step)} != {total} classes")

    @property
    def incremental_steps(self) -> int:
        return len(self.classes_per_step)

    @property
    def step_sizes(self) -> list[int]:
        head = [self.initial_classes] if self.initial_classes else []
        return head + list(self.classes_per_step)

    def step_classes(self) -> list[list[int]]:
        out, pos = [], 0
        for n in self.step_sizes:
            out.append(list(self.class_order[pos:pos + n]))
            pos += n
        return out

    @classmethod
    def protocol(cls, name: str, class_count: int = CIFAR_CLASSES, seed: int | None = None) -> "ScenarioSpec":
        key = name.lower()
        if key not in PROTOCOLS:
            raise ValueError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}")
        initial, steps = PROTOCOLS[key]
        return cls.custom(steps, initial, class_count, seed)

    @classmethod
    def custom(cls, classes_per_step: Sequence[int], initial_classes: int = 0,
               class_count: int | None = None, seed: int | None = None) -> "ScenarioSpec":
        if class_count is None:
            class_count = initial_classes + sum(classes_per_step)
        order = np.arange(class_count)
        if seed is not None:
            order = np.random.default_rng(seed).permutation(class_count)
        return cls(initial_classes, tuple(int(n) for n in classes_per_step),
                   tuple(int(c) for c in order), seed)

    def to_dict(self) -> dict:
        return {
            "initial_classes": self.initial_classes,
            "classes_per_step": list(self.classes_per_step),
            "class_order": list(self.class_order),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(int(d["initial_classes"]), tuple(d["classes_per_step"]), tuple(d["class_order"]), d.get("seed"))


@dataclass
class StepView:
    index: int  # 1-based step / task id
    classes: list[int]
    train_indices: np.ndarray
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def split_scenario(train: LabeledImageSet, spec: ScenarioSpec,
                   test: LabeledImageSet | None = None) -> list[StepView]:
    if train.class_count != len(spec.class_order):
        raise ValueError(f"scenario covers {len(spec.class_order)} classes, dataset has {train.class_count}")
    views = []
    for k, classes in enumerate(spec.step_classes(), start=1):
        tr = np.flatnonzero(np.isin(train.labels, classes))
        te = np.flatnonzero(np.isin(test.labels, classes)) if test is not None else np.zeros(0, np.int64)
        views.append(StepView(k, classes, tr, te))
    return views


def batch_iterator(indices, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Yield index batches covering every sample once; the final batch may be short."""
    if isinstance(indices, StepView):
        indices = indices.train_indices
    indices = np.asarray(indices)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if indices.size == 0:
        raise DataError("empty step view")
    order = np.random.default_rng(seed).permutation(indices) if shuffle else indices
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class StepData:
    """Normalised samples of one step, with a read audit.

    Only the step's own samples are copied in, so training code cannot reach
    other steps' data; ``reads`` and ``accessed`` record what it touched.
    """

    def __init__(self, dataset: LabeledImageSet, view: StepView, split: str = "train",
                 mean: Sequence[float] = CIFAR_MEAN, std: Sequence[float] = CIFAR_STD, dtype=np.float32):
        idx = view.train_indices if split == "train" else view.test_indices
        self.step = view.index
        self.classes = list(view.classes)
        self.source_indices = np.asarray(idx)
        self.images = normalize(dataset.images[idx], mean, std, dtype)
        self.labels = dataset.labels[idx].copy()
        if not np.isin(self.labels, self.classes).all():
            raise DataError(f"step {view.index} view references samples outside its classes")
        self.reads = 0
        self.accessed: set[int] = set()

    def __len__(self) -> int:
        return len(self.labels)

    def read(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions)
        self.reads += len(positions)
        self.accessed.update(int(i) for i in self.source_indices[positions])
        return self.images[positions], self.labels[positions]

    def batches(self, batch_size: int, seed: int, shuffle: bool = True):
        for pos in batch_iterator(np.arange(len(self)), batch_size, seed, shuffle):
            yield self.read(pos)
