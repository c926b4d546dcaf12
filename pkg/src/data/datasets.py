"""Handwritten-digit ingestion, domain variants and desk-scale synthetic tasks.

Raw datasets hold uint8 images (N x H x W). Variants operate on raw bytes;
`prepare` pads, scales and standardizes into float32 N x 1 x H x W tensors.
"""
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from src.core.errors import ConfigurationError, FormatError, InputError
from src.core.rng import DEFAULT_SEED, SeededStreams
from src.core.tensor import DTYPE

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
DATA_DIR_ENV = "ADAPTCL_DATA_DIR"
DEFAULT_DATA_DIR = "data/mnist"
STD_EPS = 1e-6

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    split: str = "train"
    classes: int = 10
    stats: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def prepared(self) -> bool:
        return self.images.dtype != np.uint8

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def subset(self, count: int) -> "ImageDataset":
        return replace(self, images=self.images[:count], labels=self.labels[:count])


@dataclass
class Task:
    name: str
    train: ImageDataset
    test: ImageDataset
    provenance: Dict[str, object] = field(default_factory=dict)


@dataclass
class TaskSequence:
    """Ordered train/test pairs sharing one input shape and one label space."""

    name: str
    tasks: List[Task]

    def __post_init__(self):
        if not self.tasks:
            raise ConfigurationError("a task sequence needs at least one task")
        shapes = {t.train.input_shape for t in self.tasks} | {t.test.input_shape for t in self.tasks}
        classes = {t.train.classes for t in self.tasks} | {t.test.classes for t in self.tasks}
        if len(shapes) != 1 or len(classes) != 1:
            raise ConfigurationError(f"tasks disagree on input shape {shapes} or class count {classes}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.tasks[0].train.input_shape

    @property
    def classes(self) -> int:
        return self.tasks[0].train.classes

    def reversed(self) -> "TaskSequence":
        return TaskSequence(f"{self.name}_reverse", list(reversed(self.tasks)))

    def mixed_test(self, upto: Optional[int] = None) -> ImageDataset:
        """Union of the test splits of tasks 0..upto (all tasks by default), without task labels."""
        upto = len(self.tasks) - 1 if upto is None else upto
        if not 0 <= upto < len(self.tasks):
            raise ConfigurationError(f"mixed test split up to task {upto} is outside 0..{len(self.tasks) - 1}")
        parts = [task.test for task in self.tasks[:upto + 1]]
        return ImageDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                            f"{self.name}_mixed", "test", self.classes)


class VariantKind(str, Enum):
    IDENTITY = "identity"
    PERMUTE = "permute"
    INVERT = "invert"
    ROTATE = "rotate"


@dataclass(frozen=True)
class VariantSpec:
    kind: VariantKind = VariantKind.IDENTITY
    seed: int = DEFAULT_SEED
    rotation_range_degrees: Tuple[float, float] = (0.0, 45.0)

    def permutation(self, n_pixels: int) -> np.ndarray:
        return SeededStreams(self.seed).stream("variant-permutation").permutation(n_pixels)


def _read_payload(path: Union[str, Path]) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == GZIP_MAGIC:
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(data) < 8:
        raise FormatError("truncated header", field=f"{what}.magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", field=f"{what}.magic")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated header", field=f"{what}.dims")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise FormatError(f"expected {size} payload bytes, found {len(data) - header}", field=f"{what}.payload")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def load_idx(path_images: Union[str, Path], path_labels: Union[str, Path], name: str = "mnist",
             split: str = "train", classes: int = 10) -> ImageDataset:
    """Decode a big-endian IDX image/label pair (gzip detected by magic bytes)."""
    images = _parse_idx(_read_payload(path_images), IMAGE_MAGIC, "images")
    labels = _parse_idx(_read_payload(path_labels), LABEL_MAGIC, "labels")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", field="count")
    if labels.size and labels.max() >= classes:
        raise FormatError(f"label {labels.max()} outside [0, {classes})", field="labels.payload")
    logger.info(f"Loaded {len(labels)} {split} images from {path_images}")
    return ImageDataset(images, labels.astype(np.int64), name, split, classes)


def pad_images(ds: ImageDataset, size: int) -> ImageDataset:
    h, w = ds.images.shape[-2:]
    if (h, w) == (size, size):
        return ds
    if h > size or w > size:
        raise ConfigurationError(f"cannot pad {h}x{w} images to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    pad = [(0, 0)] * (ds.images.ndim - 2) + [(top, size - h - top), (left, size - w - left)]
    return replace(ds, images=np.pad(ds.images, pad))


def apply_variant(ds: ImageDataset, spec: VariantSpec) -> ImageDataset:
    """Label- and size-preserving domain transform on raw uint8 images."""
    if ds.prepared:
        raise InputError("variants operate on raw byte images; apply them before prepare()")
    if spec.kind == VariantKind.IDENTITY:
        return replace(ds, images=ds.images.copy())
    n, h, w = ds.images.shape
    if spec.kind == VariantKind.PERMUTE:
        perm = spec.permutation(h * w)
        images = ds.images.reshape(n, -1)[:, perm].reshape(n, h, w)
    elif spec.kind == VariantKind.INVERT:
        images = 255 - ds.images
    else:
        lo, hi = spec.rotation_range_degrees
        angles = SeededStreams(spec.seed).stream(f"variant-rotation-{ds.split}").uniform(lo, hi, size=n)
        images = np.empty_like(ds.images)
        for i in range(n):
            rotated = ndimage.rotate(ds.images[i].astype(np.float64), angles[i], reshape=False, order=1,
                                     mode="constant", cval=0.0)
            images[i] = np.clip(np.rint(rotated), 0, 255).astype(np.uint8)
    return replace(ds, images=images, name=f"{ds.name}_{spec.kind.value}")


def inverse_permute(ds: ImageDataset, spec: VariantSpec) -> ImageDataset:
    n, h, w = ds.images.shape
    inverse = np.argsort(spec.permutation(h * w))
    return replace(ds, images=ds.images.reshape(n, -1)[:, inverse].reshape(n, h, w))


def prepare(ds: ImageDataset, stats: Optional[Tuple[float, float]] = None, pad_to: Optional[int] = 32) -> ImageDataset:
    """Pad, scale to [0, 1] and standardize; test splits reuse their training split's stats."""
    if ds.prepared:
        raise InputError(f"{ds.name} is already prepared")
    if pad_to is not None:
        ds = pad_images(ds, pad_to)
    scaled = ds.images.astype(np.float64) / 255.0
    if stats is None:
        stats = (float(scaled.mean()), float(scaled.std()))
    mean, std = stats
    images = ((scaled - mean) / max(std, STD_EPS)).astype(DTYPE)
    return replace(ds, images=images[:, np.newaxis], stats=(mean, std))


def build_task(name: str, train_raw: ImageDataset, test_raw: ImageDataset, spec: VariantSpec,
               pad_to: Optional[int] = 32, stats: Optional[Tuple[float, float]] = None) -> Task:
    if pad_to is not None:
        train_raw, test_raw = pad_images(train_raw, pad_to), pad_images(test_raw, pad_to)
    train = prepare(apply_variant(train_raw, spec), stats=stats, pad_to=None)
    test = prepare(apply_variant(test_raw, spec), stats=train.stats, pad_to=None)
    provenance = {"variant": spec.kind.value, "seed": spec.seed, "source": train_raw.name}
    return Task(name, replace(train, name=name), replace(test, name=name), provenance)


def data_dir() -> Path:
    return Path(os.getenv(DATA_DIR_ENV, DEFAULT_DATA_DIR))


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory} (set {DATA_DIR_ENV})")


def load_mnist(directory: Optional[Path] = None) -> Tuple[ImageDataset, ImageDataset]:
    directory = Path(directory) if directory is not None else data_dir()
    splits = {}
    for split, (images, labels) in MNIST_FILES.items():
        splits[split] = load_idx(_find(directory, images), _find(directory, labels), "mnist", split)
    return splits["train"], splits["test"]


def mnist_available(directory: Optional[Path] = None) -> bool:
    try:
        directory = Path(directory) if directory is not None else data_dir()
        for images, labels in MNIST_FILES.values():
            _find(directory, images), _find(directory, labels)
        return True
    except FileNotFoundError:
        return False


MNIST_SEQUENCES = {
    "strong": [("mnist", VariantKind.IDENTITY), ("permuted_mnist", VariantKind.PERMUTE),
               ("inverted_mnist", VariantKind.INVERT)],
    "mild": [("mnist", VariantKind.IDENTITY), ("permuted_mnist", VariantKind.PERMUTE),
             ("rotated_mnist", VariantKind.ROTATE)],
}


def mnist_sequence(shift: str = "strong", seed: int = DEFAULT_SEED, directory: Optional[Path] = None,
                   shared_stats: bool = False, limit: Optional[int] = None) -> TaskSequence:
    if shift not in MNIST_SEQUENCES:
        raise ConfigurationError(f"unknown MNIST sequence {shift!r}")
    train_raw, test_raw = load_mnist(directory)
    if limit:
        train_raw, test_raw = train_raw.subset(limit), test_raw.subset(limit)
    stats = prepare(train_raw).stats if shared_stats else None
    tasks = [
        build_task(name, train_raw, test_raw, VariantSpec(kind, seed=seed + idx), stats=stats)
        for idx, (name, kind) in enumerate(MNIST_SEQUENCES[shift])
    ]
    return TaskSequence(f"mnist_{shift}", tasks)


def _synthetic_split(templates: np.ndarray, n_per_class: int, noise: float, rng: np.random.Generator,
                     name: str, split: str) -> ImageDataset:
    classes = len(templates)
    labels = np.repeat(np.arange(classes), n_per_class)
    samples = templates[labels] + rng.normal(0.0, noise, size=(len(labels),) + templates.shape[1:])
    images = np.clip(np.rint(samples * 255.0), 0, 255).astype(np.uint8)
    order = rng.permutation(len(labels))
    return ImageDataset(images[order], labels[order].astype(np.int64), name, split, classes)


def _strong_variants(task_idx: int, seed: int) -> List[VariantSpec]:
    if task_idx == 0:
        return [VariantSpec(VariantKind.IDENTITY, seed)]
    return [VariantSpec(VariantKind.PERMUTE, seed + task_idx), VariantSpec(VariantKind.INVERT, seed)]


def synthetic_sequence(n_tasks: int = 3, n_per_class: int = 60, classes: int = 10, shift: str = "strong",
                       seed: int = DEFAULT_SEED, size: int = 8, test_per_class: Optional[int] = None,
                       noise: float = 0.15, max_rotation: float = 15.0) -> TaskSequence:
    """Template-plus-noise image tasks.

    Strong shift: task 0 is the identity and every later task applies its own
    pixel permutation followed by inversion, so no two tasks overlap. Mild
    shift: task k is rotated per image by up to k * max_rotation degrees
    (capped at 45), so consecutive tasks overlap.
    """
    if n_tasks <= 0 or n_per_class <= 0 or classes <= 1 or size % 2:
        raise ConfigurationError("synthetic sequences need positive sizes and an even image side")
    if shift not in ("strong", "mild"):
        raise ConfigurationError(f"unknown shift {shift!r}; expected 'strong' or 'mild'")
    streams = SeededStreams(seed)
    grid = streams.stream("synthetic-templates").random((classes, size // 2, size // 2))
    templates = np.stack([ndimage.zoom(g, 2, order=1) for g in grid])
    test_per_class = test_per_class or max(n_per_class // 2, 1)
    train_raw = _synthetic_split(templates, n_per_class, noise, streams.stream("synthetic-train"), "synthetic", "train")
    test_raw = _synthetic_split(templates, test_per_class, noise, streams.stream("synthetic-test"), "synthetic", "test")
    tasks = []
    for k in range(n_tasks):
        if shift == "strong":
            variants = _strong_variants(k, seed)
        elif k == 0:
            variants = [VariantSpec(VariantKind.IDENTITY, seed)]
        else:
            variants = [VariantSpec(VariantKind.ROTATE, seed + k, (0.0, min(45.0, max_rotation * k)))]
        train, test = train_raw, test_raw
        for spec in variants:
            train, test = apply_variant(train, spec), apply_variant(test, spec)
        name = f"synthetic_{shift}_{k}"
        train = prepare(train, pad_to=None)
        test = prepare(test, stats=train.stats, pad_to=None)
        tasks.append(Task(name, replace(train, name=name), replace(test, name=name),
                          {"variants": [v.kind.value for v in variants], "seed": seed}))
    return TaskSequence(f"synthetic_{shift}", tasks)


def identical_sequence(n_tasks: int = 2, **kwargs) -> TaskSequence:
    """The first synthetic task repeated: nothing to forget between tasks."""
    base = synthetic_sequence(n_tasks=1, **kwargs).tasks[0]
    tasks = [Task(f"{base.name}_copy{k}", base.train, base.test, dict(base.provenance)) for k in range(n_tasks)]
    return TaskSequence("synthetic_identical", tasks)
