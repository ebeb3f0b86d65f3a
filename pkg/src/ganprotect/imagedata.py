"""Image containers, binary dataset readers and augmentation.

Readers understand the binary distributions of CIFAR-10, CIFAR-100 and
STL-10. Pixels are scaled to ``[0, 1]`` at load time; any per-channel
normalization happens later through :class:`AugmentSpec`.

Record layouts::

    CIFAR-10   <1 x label><3072 x pixel>                  3073 bytes
    CIFAR-100  <1 x coarse><1 x fine><3072 x pixel>       3074 bytes
    STL-10     <27648 x pixel> per image in *_X.bin       column-major
               <1 x label (1..10)> per image in *_y.bin

CIFAR pixels are stored plane by plane (R, G, B), each plane row-major.
STL-10 pixels are stored plane by plane with each plane column-major.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
CIFAR_PIXELS = 3 * 32 * 32
STL10_PIXELS = 3 * 96 * 96

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)


class IngestionError(OSError):
    """A dataset file is missing or unreadable."""


class TruncationError(IngestionError):
    """A dataset file ends partway through a record."""

    def __init__(self, path, offset: int, record_size: int):
        self.path = str(path)
        self.offset = offset
        self.record_size = record_size
        super().__init__(
            f"{path}: truncated record at byte offset {offset} "
            f"(record size {record_size})"
        )


@dataclass(frozen=True)
class ImageTensor:
    """A single C x H x W image with its declared value range."""

    values: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"expected C x H x W array, got shape {v.shape}")
        if v.size and (v.min() < self.lo or v.max() > self.hi):
            raise ValueError(
                f"values outside declared range [{self.lo}, {self.hi}]"
            )
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable ordered collection of images and integer labels.

    ``images`` is an ``(N, C, H, W)`` float32 array and ``labels`` an
    ``(N,)`` int64 array. All images share one shape and one value range.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("one label per image required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> tuple[ImageTensor, int]:
        lo, hi = self.value_range
        return ImageTensor(self.images[i], lo, hi), int(self.labels[i])

    def __iter__(self) -> Iterator[tuple[ImageTensor, int]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def items(self) -> list[tuple[ImageTensor, int]]:
        return list(self)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes,
            self.name if name is None else name, self.value_range,
        )

    def with_images(self, images: np.ndarray, name: str | None = None,
                    value_range: tuple[float, float] | None = None) -> "LabeledDataset":
        """Same labels, new images (e.g. protected or transformed copies)."""
        return LabeledDataset(
            images, self.labels, self.num_classes,
            self.name if name is None else name,
            self.value_range if value_range is None else value_range,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_file(path: Path) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    return np.fromfile(path, dtype=np.uint8)


def _records(path: Path, record_size: int) -> np.ndarray:
    raw = _read_file(path)
    n, rem = divmod(raw.size, record_size)
    if rem:
        raise TruncationError(path, n * record_size, record_size)
    return raw.reshape(n, record_size)


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def load_cifar10(directory, split: str = "train") -> LabeledDataset:
    """Read the CIFAR-10 binary batches (``data_batch_{1..5}.bin`` / ``test_batch.bin``)."""
    directory = Path(directory)
    files = {"train": CIFAR10_TRAIN_FILES, "test": CIFAR10_TEST_FILES}[split]
    recs = np.concatenate([_records(directory / f, CIFAR10_RECORD) for f in files])
    labels = recs[:, 0].astype(np.int64)
    images = _to_unit(recs[:, 1:].reshape(-1, 3, 32, 32))
    return LabeledDataset(images, labels, 10, f"cifar10-{split}")


def load_cifar100(directory, split: str = "train") -> LabeledDataset:
    """Read CIFAR-100 ``train.bin`` / ``test.bin``; fine labels are kept."""
    directory = Path(directory)
    fname = {"train": "train.bin", "test": "test.bin"}[split]
    recs = _records(directory / fname, CIFAR100_RECORD)
    labels = recs[:, 1].astype(np.int64)
    images = _to_unit(recs[:, 2:].reshape(-1, 3, 32, 32))
    return LabeledDataset(images, labels, 100, f"cifar100-{split}")


def load_stl10(directory, split: str = "train") -> LabeledDataset:
    """Read the labelled STL-10 split, converting column-major planes to row-major."""
    directory = Path(directory)
    if split not in ("train", "test"):
        raise ValueError(f"unknown STL-10 split {split!r}")
    xs = _records(directory / f"{split}_X.bin", STL10_PIXELS)
    ys = _read_file(directory / f"{split}_y.bin")
    if ys.size != xs.shape[0]:
        raise IngestionError(
            f"{directory}: {xs.shape[0]} images but {ys.size} labels"
        )
    images = _to_unit(np.ascontiguousarray(xs.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2)))
    return LabeledDataset(images, ys.astype(np.int64) - 1, 10, f"stl10-{split}")


LOADERS = {"cifar10": load_cifar10, "cifar100": load_cifar100, "stl10": load_stl10}


def load_named(name: str, split: str = "train", root=None) -> LabeledDataset:
    """Load ``name`` from ``root/<name>``; ``root`` defaults to ``$GANPROTECT_DATA``."""
    if name not in LOADERS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(LOADERS)}")
    root = root or os.environ.get("GANPROTECT_DATA")
    if not root:
        raise IngestionError("no data root given and GANPROTECT_DATA is unset")
    return LOADERS[name](Path(root) / name, split)


def select_classes(d: LabeledDataset, classes: Sequence[int], limit: int | None = None) -> LabeledDataset:
    """Keep only ``classes`` (relabelled ``0..k-1`` in the given order), then the first ``limit`` items."""
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class ids")
    remap = np.full(d.num_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    idx = np.flatnonzero(remap[d.labels] >= 0)
    if limit is not None:
        idx = idx[:limit]
    return LabeledDataset(d.images[idx], remap[d.labels[idx]], len(classes), d.name, d.value_range)


def save_dataset_dir(directory, d: LabeledDataset) -> Path:
    """Store ``d`` as ``images.npy`` (float32), ``labels.npy`` (int64) and ``dataset.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", d.images)
    np.save(directory / "labels.npy", d.labels)
    meta = {"name": d.name, "num_classes": d.num_classes, "value_range": list(d.value_range),
            "count": len(d), "image_shape": list(d.image_shape)}
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset_dir(directory) -> LabeledDataset:
    directory = Path(directory)
    meta_path = directory / "dataset.json"
    if not meta_path.is_file():
        raise IngestionError(f"missing dataset file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    images = np.load(directory / "images.npy")
    labels = np.load(directory / "labels.npy")
    return LabeledDataset(images, labels, int(meta["num_classes"]), meta.get("name", directory.name),
                          tuple(meta.get("value_range", (0.0, 1.0))))


# --- writers (used to build fixtures in the standard layouts) ---------------

def _pixel_bytes(images: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(images, dtype=np.float64) * 255.0)
    return np.clip(q, 0, 255).astype(np.uint8)


def write_cifar10(directory, dataset: LabeledDataset, split: str = "train") -> list[Path]:
    """Write ``dataset`` as CIFAR-10 binary batch files (train: spread over 5 batches)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pix = _pixel_bytes(dataset.images).reshape(len(dataset), -1)
    recs = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    files = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    out = []
    for fname, chunk in zip(files, np.array_split(recs, len(files))):
        chunk.tofile(directory / fname)
        out.append(directory / fname)
    return out


def write_cifar100(directory, dataset: LabeledDataset, split: str = "train",
                   coarse: np.ndarray | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pix = _pixel_bytes(dataset.images).reshape(len(dataset), -1)
    if coarse is None:
        coarse = dataset.labels // 5
    recs = np.concatenate(
        [np.asarray(coarse, np.uint8)[:, None], dataset.labels.astype(np.uint8)[:, None], pix],
        axis=1,
    )
    path = directory / ("train.bin" if split == "train" else "test.bin")
    recs.tofile(path)
    return path


def write_stl10(directory, dataset: LabeledDataset, split: str = "train") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pix = _pixel_bytes(dataset.images).transpose(0, 1, 3, 2)
    xp, yp = directory / f"{split}_X.bin", directory / f"{split}_y.bin"
    np.ascontiguousarray(pix).tofile(xp)
    (dataset.labels + 1).astype(np.uint8).tofile(yp)
    return xp, yp


# --- splits and augmentation -------------------------------------------------

def split_halves(d: LabeledDataset, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded random partition into two halves; the second gets any odd item."""
    n = len(d)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return (d.subset(perm[:half], f"{d.name}/T1"),
            d.subset(perm[half:], f"{d.name}/T2"))


def channel_stats(d: LabeledDataset) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and standard deviation over a whole dataset."""
    x = d.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


@dataclass(frozen=True)
class AugmentSpec:
    crop_padding: int = 4
    horizontal_flip: bool = True
    normalize_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, ...] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std components must be > 0")
        if len(self.normalize_mean) != len(self.normalize_std):
            raise ValueError("mean and std must have one entry per channel")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(crop_padding=0, horizontal_flip=False)


@dataclass(frozen=True)
class AugmentDraw:
    """The random decisions made for one image, in draw order."""

    dy: int
    dx: int
    flip: bool


def draw_augment(spec: AugmentSpec, rng: np.random.Generator) -> AugmentDraw:
    # Draw order is part of the reproducibility contract: dy, dx, then flip.
    p = spec.crop_padding
    dy = int(rng.integers(0, 2 * p + 1)) if p else 0
    dx = int(rng.integers(0, 2 * p + 1)) if p else 0
    flip = bool(rng.random() < 0.5) if spec.horizontal_flip else False
    return AugmentDraw(dy, dx, flip)


def apply_augment(values: np.ndarray, spec: AugmentSpec, draw: AugmentDraw,
                  normalize: bool = True) -> np.ndarray:
    """Deterministic half of :func:`augment`: crop, flip, then normalize."""
    out = values
    p = spec.crop_padding
    if p:
        _, h, w = values.shape
        padded = np.pad(values, ((0, 0), (p, p), (p, p)), mode="reflect")
        out = padded[:, draw.dy:draw.dy + h, draw.dx:draw.dx + w]
    if draw.flip:
        out = out[:, :, ::-1]
    if normalize:
        mean = np.asarray(spec.normalize_mean, dtype=out.dtype)[:, None, None]
        std = np.asarray(spec.normalize_std, dtype=out.dtype)[:, None, None]
        out = (out - mean) / std
    return np.ascontiguousarray(out)


def augment(img: ImageTensor, spec: AugmentSpec, rng: np.random.Generator,
            normalize: bool = True) -> ImageTensor:
    """Random crop from a reflect-padded frame, random flip, per-channel normalization."""
    draw = draw_augment(spec, rng)
    out = apply_augment(img.values, spec, draw, normalize)
    if not normalize:
        return ImageTensor(out, img.lo, img.hi)
    mean = np.asarray(spec.normalize_mean)
    std = np.asarray(spec.normalize_std)
    lo = float(np.min((img.lo - mean) / std))
    hi = float(np.max((img.hi - mean) / std))
    return ImageTensor(out, lo, hi)


def augment_batch(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                  normalize: bool = True) -> np.ndarray:
    """Augment an ``(N, C, H, W)`` batch image by image, consuming ``rng`` in order."""
    return np.stack([
        apply_augment(im, spec, draw_augment(spec, rng), normalize) for im in images
    ]) if len(images) else np.asarray(images)
