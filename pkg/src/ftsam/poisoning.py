"""Datasets, triggers, and poisoning policies (BadNets, Blended, SIG)."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ALL_TO_ONE = "all-to-one"
ALL_TO_ALL = "all-to-all"


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    poisoned: bool = False
    original_label: Optional[int] = None

    def __post_init__(self):
        if self.original_label is None:
            self.original_label = self.label
        if not self.poisoned and self.label != self.original_label:
            raise DatasetError("a clean image must keep its original label")


@dataclass
class ImageSet:
    """Array-backed collection of labeled images.

    ``source_index`` maps each row back to its position in the dataset it was
    derived from, so poisoned selections and re-shuffles stay traceable.
    """

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64, possibly remapped
    original_labels: np.ndarray = None
    poisoned: np.ndarray = None
    source_index: np.ndarray = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.images)
        if self.original_labels is None:
            self.original_labels = self.labels.copy()
        if self.poisoned is None:
            self.poisoned = np.zeros(n, dtype=bool)
        if self.source_index is None:
            self.source_index = np.arange(n, dtype=np.int64)
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        self.source_index = np.asarray(self.source_index, dtype=np.int64)
        if not (len(self.labels) == len(self.original_labels) == len(self.poisoned) == n):
            raise DatasetError("images, labels and flags must have the same length")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), bool(self.poisoned[i]), int(self.original_labels[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(
            self.images[idx], self.labels[idx], self.original_labels[idx], self.poisoned[idx], self.source_index[idx]
        )

    @classmethod
    def from_images(cls, items: Sequence[LabeledImage]) -> "ImageSet":
        if not items:
            raise DatasetError("empty image list")
        return cls(
            np.stack([it.pixels for it in items]),
            [it.label for it in items],
            [it.original_label for it in items],
            [it.poisoned for it in items],
        )

    @property
    def num_classes(self) -> int:
        return int(self.original_labels.max()) + 1 if len(self) else 0

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# -- triggers ------------------------------------------------------------------


@dataclass(frozen=True)
class PatchTrigger:
    """Solid square in the lower-right corner (BadNets)."""

    size: int = 3
    value: float = 1.0
    corner: str = "lower-right"

    def check(self, shape) -> None:
        _, h, w = shape[-3:]
        if not 1 <= self.size <= min(h, w):
            raise DatasetError(f"patch size {self.size} does not fit a {h}x{w} image")
        if self.corner != "lower-right":
            raise DatasetError(f"unsupported patch corner {self.corner!r}")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        self.check(pixels.shape)
        out = pixels.copy()
        out[..., -self.size :, -self.size :] = self.value
        return np.clip(out, 0, 1)

    def describe(self) -> dict:
        return {"kind": "patch", "size": self.size, "value": self.value, "corner": self.corner}


@dataclass(frozen=True)
class BlendTrigger:
    """``(1 - alpha) * img + alpha * pattern`` (Blended)."""

    pattern: np.ndarray = field(repr=False, compare=False)
    alpha: float = 0.1
    pattern_seed: Optional[int] = None

    def check(self, shape) -> None:
        if not 0 <= self.alpha <= 1:
            raise DatasetError(f"blend alpha {self.alpha} outside [0, 1]")
        if tuple(self.pattern.shape) != tuple(shape[-3:]):
            raise DatasetError(f"blend pattern {self.pattern.shape} does not match image {tuple(shape[-3:])}")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        self.check(pixels.shape)
        if self.alpha == 0:
            return pixels.copy()
        if self.alpha == 1:
            return np.broadcast_to(self.pattern, pixels.shape).astype(DTYPE)
        a = DTYPE(self.alpha)
        return np.clip((1 - a) * pixels + a * self.pattern.astype(DTYPE), 0, 1)

    def describe(self) -> dict:
        return {"kind": "blend", "alpha": self.alpha, "pattern_seed": self.pattern_seed}


@dataclass(frozen=True)
class SinusoidTrigger:
    """Horizontal sinusoidal signal added to every row (SIG)."""

    delta: float = 20 / 255
    frequency: float = 6.0

    def check(self, shape) -> None:
        if not 0 <= self.delta <= 1:
            raise DatasetError(f"sinusoid delta {self.delta} outside [0, 1]")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        self.check(pixels.shape)
        w = pixels.shape[-1]
        wave = (self.delta * np.sin(2 * np.pi * np.arange(w) * self.frequency / w)).astype(DTYPE)
        return np.clip(pixels + wave, 0, 1)

    def describe(self) -> dict:
        return {"kind": "sinusoid", "delta": self.delta, "frequency": self.frequency}


Trigger = Union[PatchTrigger, BlendTrigger, SinusoidTrigger]


def blend_pattern(shape, seed: int) -> np.ndarray:
    """Deterministic uniform-noise stand-in for the blend image."""
    return np.random.default_rng(seed).random(tuple(shape)).astype(DTYPE)


def apply_trigger(img: LabeledImage, trigger: Trigger) -> LabeledImage:
    """Stamp the trigger and set the poisoned flag; the label is left alone."""
    return replace(img, pixels=trigger.apply(img.pixels), poisoned=True)


# -- policies ------------------------------------------------------------------


@dataclass(frozen=True)
class PoisonPolicy:
    ratio: float
    mode: str = ALL_TO_ONE
    num_classes: int = 10
    target: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise DatasetError(f"poisoning ratio {self.ratio} outside [0, 1]")
        if self.mode not in (ALL_TO_ONE, ALL_TO_ALL):
            raise DatasetError(f"unknown label mode {self.mode!r}")
        if self.mode == ALL_TO_ONE and not 0 <= self.target < self.num_classes:
            raise DatasetError(f"target {self.target} outside [0, {self.num_classes})")

    def target_labels(self, original: np.ndarray) -> np.ndarray:
        original = np.asarray(original, dtype=np.int64)
        if self.mode == ALL_TO_ONE:
            return np.full_like(original, self.target)
        return (original + 1) % self.num_classes

    def describe(self) -> dict:
        return {"ratio": self.ratio, "mode": self.mode, "num_classes": self.num_classes,
                "target": self.target, "seed": self.seed}


def relabel(img: LabeledImage, policy: PoisonPolicy) -> LabeledImage:
    # a relabeled image is poisoned by definition, so the flag is set here too
    return replace(img, label=int(policy.target_labels(np.array([img.original_label]))[0]), poisoned=True)


def poison_dataset(data: ImageSet, trigger: Trigger, policy: PoisonPolicy) -> ImageSet:
    """Trigger and relabel ``floor(ratio * N)`` images chosen without replacement.

    The result is re-shuffled; ``source_index`` of the poisoned rows records
    the selection.
    """
    if isinstance(data, (list, tuple)):
        data = ImageSet.from_images(data)
    n = len(data)
    rng = np.random.default_rng(policy.seed)
    n_poison = math.floor(policy.ratio * n + 1e-9)
    chosen = rng.choice(n, size=n_poison, replace=False) if n_poison else np.zeros(0, dtype=np.int64)
    images = data.images.copy()
    labels = data.original_labels.copy()
    flags = np.zeros(n, dtype=bool)
    if n_poison:
        images[chosen] = trigger.apply(images[chosen])
        labels[chosen] = policy.target_labels(data.original_labels[chosen])
        flags[chosen] = True
    order = rng.permutation(n)
    return ImageSet(images[order], labels[order], data.original_labels[order], flags[order], data.source_index[order])


def make_eval_sets(test: ImageSet, trigger: Trigger, policy: PoisonPolicy) -> Tuple[ImageSet, ImageSet]:
    """Benign test set plus a fully triggered copy.

    For all-to-one, images whose ground truth already is the target class
    are dropped from the triggered copy.
    """
    if isinstance(test, (list, tuple)):
        test = ImageSet.from_images(test)
    if len(test) == 0:
        raise DatasetError("empty test set")
    keep = np.arange(len(test))
    if policy.mode == ALL_TO_ONE:
        keep = keep[test.original_labels != policy.target]
    if keep.size == 0:
        raise DatasetError("every test image belongs to the target class; poisoned eval set is empty")
    src = test.subset(keep)
    poisoned = ImageSet(
        trigger.apply(src.images),
        policy.target_labels(src.original_labels),
        src.original_labels,
        np.ones(len(src), dtype=bool),
        src.source_index,
    )
    return test, poisoned


def split_benign_subset(train: ImageSet, fraction: float, seed: int) -> ImageSet:
    """Class-stratified clean subset of ``floor(fraction * N)`` images.

    Per-class quotas use largest remainders (ties to the lower class index).
    """
    if not 0 < fraction <= 1:
        raise DatasetError(f"benign fraction {fraction} outside (0, 1]")
    if train.poisoned.any():
        raise DatasetError("benign subset must be drawn from clean images")
    n = len(train)
    total = math.floor(fraction * n + 1e-9)
    classes, counts = np.unique(train.original_labels, return_counts=True)
    exact = counts * total / n
    quota = np.floor(exact + 1e-9).astype(int)
    leftover = total - quota.sum()
    if leftover > 0:
        order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
        for i in order[:leftover]:
            quota[i] += 1
    if (quota == 0).any():
        empty = classes[quota == 0].tolist()
        raise DatasetError(f"classes {empty} get no samples at fraction {fraction}")
    rng = np.random.default_rng(seed)
    picked = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(train.original_labels == c)
        picked.append(np.sort(rng.choice(members, size=q, replace=False)))
    idx = np.concatenate(picked)
    return train.subset(idx[rng.permutation(idx.size)])


# -- sources -------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def load_idx(images_path, labels_path) -> ImageSet:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled by 1/255."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise DatasetError("truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{images_path}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DatasetError(f"{labels_path}: label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if n != ln:
        raise DatasetError(f"{n} images but {ln} labels")
    if len(img) - 16 < n * rows * cols or len(lab) - 8 < n:
        raise DatasetError("truncated IDX payload")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    images = (pixels.astype(DTYPE) / DTYPE(255)).reshape(n, 1, rows, cols)
    return ImageSet(images, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for uint8 data; used to build fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def _blob_centers(num_classes: int, size: int) -> np.ndarray:
    # ring around the image centre, well clear of the lower-right trigger corner
    c = (size - 1) / 2
    r = size * 0.28
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 2
    return np.stack([c - r * np.sin(angles), c - r * np.cos(angles)], axis=1)


def synth_dataset(num_classes: int, n_per_class: int, seed: int, size: int = 16,
                  noise: float = 0.1, jitter: float = 1.0) -> ImageSet:
    """Class-conditional Gaussian blobs on a noisy background, 1 x size x size."""
    if num_classes < 2:
        raise DatasetError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(num_classes, size)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = labels.size
    pos = centers[labels] + rng.uniform(-jitter, jitter, size=(n, 2))
    width = rng.uniform(1.2, 1.8, size=n)
    amp = rng.uniform(0.7, 1.0, size=n)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2 * width[:, None, None] ** 2))
    img = img + noise * rng.standard_normal(img.shape) + 0.15
    img = np.clip(img, 0, 1)[:, None]
    order = rng.permutation(n)
    return ImageSet(img[order].astype(DTYPE), labels[order])
