"""Datasets: IDX (MNIST-format) loading, synthetic blobs, and mini-batching."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ConsistencyError, ContractError, DimensionError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SPLIT_STREAM = {"train": 0, "test": 1}


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images in ``[0, 1]`` with shape ``[N, C, H, W]`` and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.name}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError(f"pixels of {self.name} fall outside [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels of {self.name} fall outside [0, {self.num_classes})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx].copy(), self.labels[idx].copy(), self.num_classes, self.split, self.name
        )

    def sample(self, n: int, seed: int) -> "Dataset":
        """Seeded subset of ``min(n, len(self))`` distinct examples, kept in index order."""
        if n < 1:
            raise ContractError("sample size must be positive")
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = math.prod(dims)
    if len(raw) - header_end != count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_idx(
    images_path,
    labels_path,
    split: str = "train",
    name: Optional[str] = None,
    num_classes: int = 10,
) -> Dataset:
    """Load an IDX image/label file pair (optionally gzipped) into a :class:`Dataset`.

    Raises:
        FormatError: wrong magic number or malformed payload.
        ConsistencyError: image and label counts differ.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if len(pixels) != len(labels):
        raise ConsistencyError(
            f"{images_path} holds {len(pixels)} images but {labels_path} holds {len(labels)} labels"
        )
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    num_classes = max(num_classes, int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images, labels.astype(np.int64), num_classes, split, name or images_path.stem)


def blob_centers(num_classes: int, height: int, width: int) -> np.ndarray:
    """Class blob centers on a regular grid inset from the image border."""
    side = math.ceil(math.sqrt(num_classes))
    ys = (np.arange(side) + 0.5) * height / side
    xs = (np.arange(side) + 0.5) * width / side
    grid = np.array([(y, x) for y in ys for x in xs])
    return grid[:num_classes] - 0.5


def synthetic_blobs(
    num_classes: int,
    per_class: int,
    image_shape: Sequence[int],
    seed: int,
    noise: float = 0.2,
    amplitude: float = 0.25,
    sigma: Optional[float] = None,
    background: float = 0.3,
    split: str = "train",
) -> Dataset:
    """Gaussian-blob classification data.

    Class ``c`` is a Gaussian bump of height ``amplitude`` centered at a
    class-specific grid location over a constant ``background``, plus
    i.i.d. pixel noise with standard deviation ``noise``, clipped to
    ``[0, 1]``. Train and test splits draw from independent random streams.
    """
    if len(image_shape) != 3 or min(image_shape) < 1:
        raise DimensionError(f"image_shape must be (C, H, W) with positive entries, got {image_shape}")
    if num_classes < 1 or per_class < 1:
        raise DimensionError(f"need num_classes >= 1 and per_class >= 1, got {num_classes}, {per_class}")
    if split not in _SPLIT_STREAM:
        raise ContractError(f"split must be 'train' or 'test', got {split!r}")
    c, h, w = (int(v) for v in image_shape)
    sigma = sigma if sigma is not None else max(h, w) / 8.0
    yy, xx = np.mgrid[0:h, 0:w]
    patterns = np.empty((num_classes, c, h, w))
    for k, (cy, cx) in enumerate(blob_centers(num_classes, h, w)):
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        patterns[k] = background + amplitude * bump

    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = patterns[labels] + noise * rng.standard_normal((len(labels), c, h, w))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes, split, f"blobs-{split}")


def blob_splits(
    num_classes: int, per_class: int, test_per_class: int, image_shape: Sequence[int], seed: int, **kwargs
) -> Tuple[Dataset, Dataset]:
    train = synthetic_blobs(num_classes, per_class, image_shape, seed, split="train", **kwargs)
    test = synthetic_blobs(num_classes, test_per_class, image_shape, seed, split="test", **kwargs)
    return train, test


class BatchIterator:
    """Seeded mini-batches over a dataset; each pass over it is one epoch.

    The order of epoch ``e`` depends only on ``(seed, e)``. The final partial
    batch is emitted.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True):
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def index_batches(self, epoch: int) -> Iterator[np.ndarray]:
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            yield order[start : start + self.batch_size]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        epoch = self.epoch
        self.epoch += 1
        for idx in self.index_batches(epoch):
            yield self.dataset.images[idx], self.dataset.labels[idx]


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    it = BatchIterator(dataset, batch_size, seed, shuffle)
    it.epoch = epoch
    return iter(it)
