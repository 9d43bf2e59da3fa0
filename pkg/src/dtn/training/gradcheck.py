"""Reverse-mode gradients against central finite differences."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from dtn.conf import TrainConfig
from dtn.errors import TrainingError
from dtn.model import DeepTensorNetwork
from dtn.training.trainer import batch_loss
from dtn.training.trainer import loss_and_grads

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
# gradients smaller than this are compared absolutely
RELATIVE_FLOOR = 1e-4


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), RELATIVE_FLOOR)
        return abs(self.analytic - self.numeric) / scale


def finite_difference(
    net: DeepTensorNetwork,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    name: str,
    index: tuple[int, ...],
    step: float = DEFAULT_STEP,
) -> float:
    base = net.parameters()[name].numpy()

    def loss_at(offset: float) -> float:
        shifted = base.copy()
        shifted[index] += offset
        return batch_loss(net.with_parameters({name: shifted}), inputs, targets, config).item()

    return (loss_at(step) - loss_at(-step)) / (2.0 * step)


def grad_check_entries(
    net: DeepTensorNetwork,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    per_parameter: int = 4,
    step: float = DEFAULT_STEP,
) -> list[GradCheckEntry]:
    """Compare a random subset of entries of every parameter tensor."""
    if not net.parameters():
        raise TrainingError("network has no parameters to check")
    _, grads = loss_and_grads(net, inputs, targets, config)
    entries = []
    for name, value in net.parameters().items():
        count = min(per_parameter, value.size)
        for flat in rng.choice(value.size, size=count, replace=False):
            index = tuple(int(i) for i in np.unravel_index(flat, value.shape))
            numeric = finite_difference(net, inputs, targets, config, name, index, step)
            entries.append(GradCheckEntry(name, index, float(grads[name][index]), numeric))
    return entries


def grad_check(
    net: DeepTensorNetwork,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    per_parameter: int = 4,
    step: float = DEFAULT_STEP,
) -> float:
    """Largest relative error between analytic and numeric gradients."""
    entries = grad_check_entries(net, inputs, targets, config, rng, per_parameter, step)
    if not entries:
        raise TrainingError(f"no gradient entries to compare with per_parameter={per_parameter}")
    worst = max(entries, key=lambda entry: entry.relative_error)
    logger.info(
        "grad check over %d entries: max relative error %.3g at %s%s",
        len(entries),
        worst.relative_error,
        worst.name,
        list(worst.index),
    )
    return worst.relative_error
