"""Image classification: dataset splits, model construction, training and
ensemble evaluation."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtn.conf import TrainConfig
from dtn.conf import make_rng
from dtn.datasets import IDENTITY_SEED
from dtn.datasets import ImageDataset
from dtn.datasets import apply_permutation
from dtn.datasets import fixed_resize_transform
from dtn.datasets import load_idx
from dtn.datasets import random_resize_transform
from dtn.datasets import resize_crop
from dtn.datasets import stratified_subset
from dtn.errors import ConfigurationError
from dtn.errors import DatasetError
from dtn.model import DeepTensorNetwork
from dtn.model import build_network
from dtn.mps import ensemble_logits
from dtn.training.trainer import Samples
from dtn.training.trainer import TrainResult
from dtn.training.trainer import kfold_indices
from dtn.training.trainer import predict
from dtn.training.trainer import train

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
DEFAULT_TRAIN_SIZE = 2000
DEFAULT_TEST_SIZE = 1000
ENSEMBLE_MODES = ("same", "random")

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class ImageModelSpec:
    """Architecture of an image classifier.

    `depth=0` is the plain MPS classifier. Layers default to the matrix
    exponential activation with L1 output normalization.
    """

    head_bond_dim: int = 20
    mpo_bond_dim: int = 10
    depth: int = 0
    uniform: bool = False
    activation: str = "matrix_exp"
    residual: bool = False
    normalize_output: bool = True
    output_norm: str = "l1"
    num_classes: int = NUM_CLASSES
    head_noise: float = 1e-2
    mpo_noise: float = 1e-2

    def build(self, rng: np.random.Generator, sites: int) -> DeepTensorNetwork:
        return build_network(
            rng,
            depth=self.depth,
            mpo_bond_dim=self.mpo_bond_dim,
            head_bond_dim=self.head_bond_dim,
            num_classes=self.num_classes,
            sites=None if self.uniform else sites,
            mpo_noise=self.mpo_noise,
            head_noise=self.head_noise,
            activation=self.activation,
            residual=self.residual,
            normalize_output=self.normalize_output,
            output_norm=self.output_norm,
        )


@dataclass(frozen=True)
class Member:
    """A trained classifier with the pixel permutation it was trained on."""

    net: DeepTensorNetwork
    permute_seed: int = IDENTITY_SEED


def split_paths(data_dir: Path, split: str) -> tuple[Path, Path]:
    """IDX files of a split, preferring uncompressed copies over `.gz`."""
    if split not in SPLIT_FILES:
        raise DatasetError(f"unknown split {split!r}, expected one of {sorted(SPLIT_FILES)}")
    paths = []
    for name in SPLIT_FILES[split]:
        plain, packed = data_dir / name, data_dir / f"{name}.gz"
        if plain.is_file():
            paths.append(plain)
        elif packed.is_file():
            paths.append(packed)
        else:
            raise DatasetError(f"{data_dir} has neither {plain.name} nor {packed.name}")
    return paths[0], paths[1]


def load_split(
    data_dir: Path, split: str, size: int | None = None, seed: int = 0
) -> ImageDataset:
    """One split, reduced to a stratified subset of `size` images."""
    dataset = load_idx(*split_paths(data_dir, split))
    if size is not None:
        dataset = stratified_subset(dataset, size, make_rng(seed))
        logger.info("using a stratified subset of %d %s images", len(dataset), split)
    return dataset


def prepare(
    dataset: ImageDataset, permute_seed: int = IDENTITY_SEED, size: tuple[int, int] | None = None
) -> ImageDataset:
    """Resize (when `size` differs) and apply the pixel permutation."""
    resized = size is not None and size != (dataset.height, dataset.width)
    if resized and permute_seed != IDENTITY_SEED:
        raise DatasetError("a permuted model can only see images at its training size")
    if resized:
        dataset = resize_crop(dataset, *size)
    return apply_permutation(dataset, permute_seed)


def train_image_model(
    dataset: ImageDataset,
    spec: ImageModelSpec,
    config: TrainConfig,
    *,
    validation: ImageDataset | None = None,
    resize_range: tuple[int, int] | None = None,
    history_path: Path | None = None,
) -> TrainResult:
    """Train one classifier on already permuted images.

    With `resize_range` every batch is resized to a random height and width
    drawn from the range, which needs a uniform model.
    """
    net = spec.build(make_rng(config.seed), dataset.height * dataset.width)
    logger.info(
        "training image model depth=%d D_mps=%d D_mpo=%d uniform=%s on %d images (seed %d)",
        spec.depth,
        spec.head_bond_dim,
        spec.mpo_bond_dim,
        spec.uniform,
        len(dataset),
        config.seed,
    )
    held_out = None
    if resize_range is None:
        samples = Samples(dataset.flattened(), dataset.labels)
        if validation is not None:
            held_out = Samples(validation.flattened(), validation.labels)
        return train(net, samples, config, validation=held_out, history_path=history_path)
    if not spec.uniform:
        raise ConfigurationError("variable-size training needs a uniform model")
    samples = Samples(dataset.images, dataset.labels)
    eval_transform = None
    if validation is not None:
        held_out = Samples(validation.images, validation.labels)
        eval_transform = fixed_resize_transform(validation.height, validation.width)
    return train(
        net,
        samples,
        config,
        validation=held_out,
        history_path=history_path,
        batch_transform=random_resize_transform(resize_range, resize_range),
        eval_transform=eval_transform,
    )


def train_folds(
    dataset: ImageDataset,
    spec: ImageModelSpec,
    config: TrainConfig,
    *,
    permute_seed: int = IDENTITY_SEED,
    ensemble: str = "same",
) -> list[Member]:
    """One model per stratified fold, validated on its held-out fold.

    `ensemble="same"` shares `permute_seed` across members; `"random"` gives
    member i the seed `permute_seed + i + 1`.
    """
    if ensemble not in ENSEMBLE_MODES:
        raise ConfigurationError(f"ensemble must be one of {ENSEMBLE_MODES}, got {ensemble!r}")
    rng = make_rng(config.seed)
    members = []
    splits = kfold_indices(len(dataset), config.folds, rng, dataset.labels)
    for fold, (train_idx, val_idx) in enumerate(splits):
        seed = permute_seed if ensemble == "same" else permute_seed + fold + 1
        permuted = apply_permutation(dataset, seed)
        result = train_image_model(
            permuted.take(train_idx),
            spec,
            config.merged({"seed": config.seed + fold}),
            validation=permuted.take(val_idx),
        )
        logger.info("fold %d/%d done", fold + 1, config.folds)
        members.append(Member(result.net, seed))
    return members


def member_logits(
    member: Member, dataset: ImageDataset, size: tuple[int, int] | None = None
) -> np.ndarray:
    prepared = prepare(dataset, member.permute_seed, size)
    head = member.net.head
    pixels = prepared.height * prepared.width
    if head is not None and head.sites is not None and head.sites != pixels:
        raise ConfigurationError(f"model expects {head.sites} pixels, images have {pixels}")
    return predict(member.net, prepared.flattened())


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def ensemble_accuracy(
    members: Sequence[Member], dataset: ImageDataset, size: tuple[int, int] | None = None
) -> tuple[list[float], float]:
    """Accuracy of every member and of their averaged logits."""
    all_logits = [member_logits(member, dataset, size) for member in members]
    singles = [accuracy(value, dataset.labels) for value in all_logits]
    combined = accuracy(ensemble_logits(all_logits).numpy(), dataset.labels)
    return singles, combined


def write_ensemble_csv(
    rows: Sequence[tuple[str, Sequence[float], float]], path: Path
) -> None:
    """One row per member and one `ensemble` row for every evaluated size."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["size", "member", "accuracy"])
        for size, singles, combined in rows:
            for index, value in enumerate(singles):
                writer.writerow([size, index, f"{value:.6f}"])
            writer.writerow([size, "ensemble", f"{combined:.6f}"])


def scaled_sizes(height: int, width: int, scales: Iterable[float]) -> list[tuple[int, int]]:
    """Sizes with the aspect ratio kept and both sides scaled."""
    return [(round(height * scale), round(width * scale)) for scale in scales]


def aspect_sizes(height: int, width: int, aspects: Iterable[float]) -> list[tuple[int, int]]:
    """Sizes with the pixel count roughly kept and width/height = aspect."""
    area = height * width
    sizes = []
    for aspect in aspects:
        new_height = round(np.sqrt(area / aspect))
        sizes.append((new_height, round(new_height * aspect)))
    return sizes
