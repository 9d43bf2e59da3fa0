from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest

from dtn.conf import TrainConfig
from dtn.conf import make_rng
from dtn.images import SPLIT_FILES

from .utils import idx_bytes

TEST_DIR = Path(__file__).parent
IMAGE_SIDE = 6
IMAGES_PER_SPLIT = 40


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def fast_config() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, lr=0.01, seed=0)


@pytest.fixture(autouse=True)
def reset_dtn_logger():
    yield
    root = logging.getLogger("dtn")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.NOTSET)
    root.propagate = True


def write_image_split(
    directory: Path, split: str, rng: np.random.Generator, count: int, side: int
) -> None:
    images_name, labels_name = SPLIT_FILES[split]
    labels = np.arange(count, dtype=np.uint8) % 10
    images = rng.integers(0, 256, size=(count, side, side), dtype=np.uint8)
    (directory / images_name).write_bytes(idx_bytes(images, 2051))
    (directory / labels_name).write_bytes(idx_bytes(labels, 2049))


@pytest.fixture
def image_dir(tmp_path: Path) -> Path:
    """Tiny train and test IDX splits of 6x6 images with balanced labels."""
    directory = tmp_path / "images"
    directory.mkdir()
    rng = make_rng(7)
    for split in SPLIT_FILES:
        write_image_split(directory, split, rng, IMAGES_PER_SPLIT, IMAGE_SIDE)
    return directory
