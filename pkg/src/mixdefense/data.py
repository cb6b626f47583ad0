"""Dataset ingestion, normalization, splitting and batching.

Pixel values live in [0,1] everywhere inside the package; the 0-255 byte
scale exists only at the file boundary. Shuffling uses numpy's PCG64
generator seeded per call, so any batch sequence is bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes, channel-planar


class DataFormatError(ValueError):
    """A dataset file does not conform to its declared binary format."""


class IdxMagicError(DataFormatError):
    """IDX file starts with the wrong magic number."""


class IdxTruncatedError(DataFormatError):
    """IDX payload is shorter than its header declares."""


class LabelCountMismatchError(DataFormatError):
    """Image file and label file disagree on the number of records."""


class CifarFormatError(DataFormatError):
    """CIFAR binary batch has an invalid size."""


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (H, W, C) float32 in [0,1]
    label: int


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered, immutable collection of (image, label) pairs.

    images: (N, H, W, C) float32 in [0,1]; labels: (N,) int64 in [0, class_count).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str
    split: str  # "train" or "test"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,H,W,C), got shape {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset must be non-empty")
        if self.images.shape[-1] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {self.images.shape[-1]}")
        if len(self.labels) != len(self.images):
            raise ValueError("images/labels length mismatch")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0,1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("labels must lie in [0, class_count)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(image=self.images[i], label=int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, indices: Sequence[int], split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            class_count=self.class_count,
            name=self.name,
            split=split if split is not None else self.split,
        )


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray  # positions into the source dataset
    images: np.ndarray   # (B, H, W, C)
    labels: np.ndarray   # (B,)

    def __len__(self) -> int:
        return len(self.indices)


def _read_idx_header(raw: bytes, path, expected_magic: int, n_dims: int) -> tuple[tuple[int, ...], int]:
    head = 4 * (1 + n_dims)
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: file shorter than IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: expected magic {expected_magic}, found {magic}")
    dims = struct.unpack(f">{n_dims}i", raw[4:head])
    return dims, head


def load_mnist_idx(images_path, labels_path, *, name: str = "mnist", split: str = "test",
                   class_count: int = 10) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, magic 2051/2049)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_images = images_path.read_bytes()
    raw_labels = labels_path.read_bytes()

    (n_img, rows, cols), off = _read_idx_header(raw_images, images_path, IDX_IMAGE_MAGIC, 3)
    if len(raw_images) - off < n_img * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: header declares {n_img}x{rows}x{cols} pixels, payload truncated")
    (n_lab,), loff = _read_idx_header(raw_labels, labels_path, IDX_LABEL_MAGIC, 1)
    if len(raw_labels) - loff < n_lab:
        raise IdxTruncatedError(f"{labels_path}: label payload truncated")
    if n_img != n_lab:
        raise LabelCountMismatchError(
            f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")

    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=n_img * rows * cols, offset=off)
    images = (pixels.reshape(n_img, rows, cols, 1).astype(np.float32)) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_lab, offset=loff).astype(np.int64)
    return LabeledDataset(images=images, labels=labels, class_count=class_count,
                          name=name, split=split)


def write_mnist_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Inverse of load_mnist_idx: serialize a 1-channel dataset to IDX bytes."""
    n, h, w, c = ds.images.shape
    if c != 1:
        raise ValueError("IDX serialization expects a single-channel dataset")
    pixels = np.round(ds.images[..., 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_cifar_binary(batch_paths: Sequence, *, name: str = "cifar10", split: str = "test",
                      class_count: int = 10) -> LabeledDataset:
    """Load CIFAR-10 style binary batches (3073-byte records, planar R,G,B)."""
    paths = [Path(p) for p in batch_paths]
    if not paths:
        raise ValueError("batch_paths must name at least one file")
    all_images, all_labels = [], []
    for path in paths:
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise CifarFormatError(
                f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        planar = records[:, 1:].reshape(-1, 3, 32, 32)  # (N, C, H, W) channel-planar
        all_images.append(planar.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
    return LabeledDataset(images=np.concatenate(all_images), labels=np.concatenate(all_labels),
                          class_count=class_count, name=name, split=split)


def write_cifar_binary(ds: LabeledDataset, path) -> None:
    """Inverse of load_cifar_binary for a 3-channel 32x32 dataset."""
    n, h, w, c = ds.images.shape
    if (h, w, c) != (32, 32, 3):
        raise ValueError("CIFAR serialization expects 32x32x3 images")
    pixels = np.round(ds.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2)
    with open(path, "wb") as f:
        for i in range(n):
            f.write(struct.pack("B", int(ds.labels[i])))
            f.write(pixels[i].tobytes())


def batches(ds: LabeledDataset, batch_size: int, seed: int = 0,
            shuffle: bool = False) -> list[Batch]:
    """Partition the dataset into batches (final partial batch included).

    With shuffle=True the order is a PCG64(seed) permutation; the same seed
    always yields the identical batch sequence.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if batch_size > len(ds):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ds))
    out = []
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        out.append(Batch(indices=idx, images=ds.images[idx], labels=ds.labels[idx]))
    return out


def train_validation_split(ds: LabeledDataset, validation_fraction: float,
                           seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic seeded split; validation gets round(fraction * N) examples."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must be in (0,1)")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ds))
    n_val = int(round(validation_fraction * len(ds)))
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])
