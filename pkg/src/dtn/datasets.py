"""Image datasets: IDX files, fixed pixel permutations, resizing and cropping."""

from __future__ import annotations

import dataclasses
import gzip
import logging
import math
import struct
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtn.conf import make_rng
from dtn.errors import DatasetError
from dtn.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
# permutation seed that keeps the original pixel order
IDENTITY_SEED = -1
MIN_SIDE = 4


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 3:
            raise DatasetError(f"images must be (count, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def flattened(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def take(self, indices: np.ndarray) -> ImageDataset:
        return ImageDataset(self.images[indices], self.labels[indices])


def _read(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def parse_idx(raw: bytes, magic: int, ndim: int, source: str = "<bytes>") -> np.ndarray:
    """Unsigned-byte payload of a big-endian IDX file."""
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{source}: truncated header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{source}: magic number {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    payload = len(raw) - header
    if payload < expected:
        raise IdxFormatError(f"{source}: truncated, {payload} of {expected} data bytes")
    if payload > expected:
        raise IdxFormatError(f"{source}: {payload - expected} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path: Path, labels_path: Path) -> ImageDataset:
    """Images (magic 2051) scaled to [0, 1] with their labels (magic 2049).

    Files ending in `.gz` are decompressed on the fly.
    """
    images = parse_idx(_read(images_path), IMAGE_MAGIC, 3, str(images_path))
    labels = parse_idx(_read(labels_path), LABEL_MAGIC, 1, str(labels_path))
    if len(images) != len(labels):
        raise IdxFormatError(
            f"{images_path} has {len(images)} images "
            f"but {labels_path} has {len(labels)} labels"
        )
    logger.info(
        "loaded %d images of %dx%d from %s", len(images), *images.shape[1:], images_path
    )
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def permutation_for(seed: int, size: int) -> np.ndarray:
    if seed == IDENTITY_SEED:
        return np.arange(size)
    return make_rng(seed).permutation(size)


def apply_permutation(dataset: ImageDataset, seed: int) -> ImageDataset:
    """Shuffle the flattened pixel order of every image the same way."""
    order = permutation_for(seed, dataset.height * dataset.width)
    permuted = dataset.flattened()[:, order].reshape(dataset.images.shape)
    return dataclasses.replace(dataset, images=permuted)


def invert_permutation(dataset: ImageDataset, seed: int) -> ImageDataset:
    order = np.argsort(permutation_for(seed, dataset.height * dataset.width))
    restored = dataset.flattened()[:, order].reshape(dataset.images.shape)
    return dataclasses.replace(dataset, images=restored)


def _axis_weights(size_in: int, size_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    source = (np.arange(size_out) + 0.5) * size_in / size_out - 0.5
    source = np.clip(source, 0.0, size_in - 1)
    low = np.floor(source).astype(np.int64)
    high = np.minimum(low + 1, size_in - 1)
    return low, high, source - low


def resize_images(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of (count, H, W) with half-pixel centres."""
    top, bottom, dy = _axis_weights(images.shape[1], height)
    left, right, dx = _axis_weights(images.shape[2], width)
    rows = (
        images[:, top, :] * (1.0 - dy)[None, :, None] + images[:, bottom, :] * dy[None, :, None]
    )
    out = rows[:, :, left] * (1.0 - dx) + rows[:, :, right] * dx
    return np.clip(out, 0.0, 1.0)


def crop_images(
    images: np.ndarray, height: int, width: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Centre crop, or one random window per image when `rng` is given."""
    count, full_h, full_w = images.shape
    if height > full_h or width > full_w:
        raise DatasetError(f"crop {height}x{width} exceeds image size {full_h}x{full_w}")
    if rng is None:
        top, left = (full_h - height) // 2, (full_w - width) // 2
        return images[:, top : top + height, left : left + width]
    tops = rng.integers(0, full_h - height + 1, size=count)
    lefts = rng.integers(0, full_w - width + 1, size=count)
    return np.stack(
        [
            image[top : top + height, left : left + width]
            for image, top, left in zip(images, tops, lefts)
        ]
    )


def resize_crop(
    dataset: ImageDataset,
    target_h: int,
    target_w: int,
    crop: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
) -> ImageDataset:
    if target_h < MIN_SIDE or target_w < MIN_SIDE:
        raise DatasetError(f"resize targets must be >= {MIN_SIDE}, got {target_h}x{target_w}")
    images = resize_images(dataset.images, target_h, target_w)
    if crop is not None:
        images = crop_images(images, *crop, rng=rng)
    return dataclasses.replace(dataset, images=images)


def stratified_subset(dataset: ImageDataset, size: int, rng: np.random.Generator) -> ImageDataset:
    """About `size` images with the label proportions of the full set."""
    if size >= len(dataset):
        return dataset
    chosen = []
    for label in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == label)
        share = round(size * len(members) / len(dataset))
        chosen.append(rng.choice(members, size=min(share, len(members)), replace=False))
    indices = np.sort(np.concatenate(chosen))
    return dataset.take(indices)


def random_resize_transform(
    heights: tuple[int, int], widths: tuple[int, int]
) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    """Batch transform: resize each batch to a random size, then flatten."""

    def transform(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        height = int(rng.integers(heights[0], heights[1] + 1))
        width = int(rng.integers(widths[0], widths[1] + 1))
        return resize_images(images, height, width).reshape(len(images), -1)

    return transform


def fixed_resize_transform(height: int, width: int) -> Callable[[np.ndarray], np.ndarray]:
    def transform(images: np.ndarray) -> np.ndarray:
        return resize_images(images, height, width).reshape(len(images), -1)

    return transform
