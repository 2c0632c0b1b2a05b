"""
Dataset file format (DWDS), splits and mini-batch iteration.

Layout (little-endian)::

    magic    4 bytes  b"DWDS"
    version  u32
    count    u32
    C, H, W  u32 x 3
    classes  u32
    images   count * C * H * W float32
    labels   count uint32
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Iterator, Optional, Tuple, Union

import numpy as np

from utils.common.artifacts import atomic_write_bytes
from utils.common.errors import DataFormatError, MissingArtifactError
from utils.common.logger import get_logger

logger = get_logger(__name__)

DATASET_MAGIC = b"DWDS"
DATASET_VERSION = 1


@dataclass
class DatasetFile:
    """Images [N, C, H, W] (float32) with integer labels in [0, classes)."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    header: ClassVar[struct.Struct] = struct.Struct("<4sIIIIII")

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels must lie in [0, {self.classes}), found {self.labels.min()}..{self.labels.max()}")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @classmethod
    def expected_length(cls, count: int, c: int, h: int, w: int) -> int:
        return cls.header.size + 4 * count * (c * h * w + 1)

    def subset(self, indices) -> "DatasetFile":
        return DatasetFile(self.images[indices], self.labels[indices], self.classes)

    def to_bytes(self) -> bytes:
        c, h, w = self.image_shape
        head = self.header.pack(DATASET_MAGIC, DATASET_VERSION, self.count, c, h, w, self.classes)
        return head + self.images.astype("<f4").tobytes() + self.labels.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, source: str = "<bytes>") -> "DatasetFile":
        """
        Raises:
            DataFormatError: Bad magic or version, or a length that disagrees with the header
        """
        if len(payload) < cls.header.size:
            raise DataFormatError(
                f"{source}: truncated dataset, expected at least {cls.header.size} bytes, got {len(payload)}"
            )
        magic, version, count, c, h, w, classes = cls.header.unpack_from(payload, 0)
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"{source}: bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
        if version != DATASET_VERSION:
            raise DataFormatError(f"{source}: unsupported dataset version {version}, expected {DATASET_VERSION}")
        expected = cls.expected_length(count, c, h, w)
        if len(payload) != expected:
            raise DataFormatError(f"{source}: dataset length mismatch, expected {expected} bytes, got {len(payload)}")
        offset = cls.header.size
        n_pixels = count * c * h * w
        images = np.frombuffer(payload, dtype="<f4", count=n_pixels, offset=offset).reshape(count, c, h, w)
        labels = np.frombuffer(payload, dtype="<u4", count=count, offset=offset + 4 * n_pixels)
        return cls(images.astype(np.float32), labels.astype(np.int64), classes)


def save_dataset(path: Union[str, Path], dataset: DatasetFile) -> Path:
    return atomic_write_bytes(path, dataset.to_bytes())


def load_dataset(path: Union[str, Path]) -> DatasetFile:
    source = Path(path)
    if not source.exists():
        raise MissingArtifactError(source, produced_by="gen-data")
    dataset = DatasetFile.from_bytes(source.read_bytes(), source=str(source))
    logger.debug(f"Loaded {dataset.count} images of shape {dataset.image_shape} from {source}")
    return dataset


@dataclass
class DatasetSplit:
    train: DatasetFile
    valid: DatasetFile


def split_dataset(dataset: DatasetFile, valid_fraction: float, seed: int) -> DatasetSplit:
    """Deterministic shuffled train/valid split."""
    order = np.random.default_rng([seed, 1]).permutation(dataset.count)
    n_valid = int(round(valid_fraction * dataset.count))
    n_valid = min(max(n_valid, 1), dataset.count - 1)
    return DatasetSplit(dataset.subset(np.sort(order[n_valid:])), dataset.subset(np.sort(order[:n_valid])))


def random_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror each image horizontally with probability 1/2."""
    flip = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def iterate_batches(
    dataset: DatasetFile,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    max_batches: Optional[int] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Yield (images, labels) mini-batches, shuffled when ``rng`` is given.

    A trailing batch with a single image is dropped (batch statistics need two).
    """
    order = rng.permutation(dataset.count) if rng is not None else np.arange(dataset.count)
    for i, start in enumerate(range(0, dataset.count, batch_size)):
        if max_batches is not None and i >= max_batches:
            return
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            return
        yield dataset.images[idx], dataset.labels[idx]


def batches_per_epoch(count: int, batch_size: int, max_batches: Optional[int] = None) -> int:
    full, rest = divmod(count, batch_size)
    n = full + (1 if rest >= 2 else 0)
    return min(n, max_batches) if max_batches is not None else n
