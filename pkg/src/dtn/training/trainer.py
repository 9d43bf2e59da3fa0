from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections.abc import Callable
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dtn.conf import TrainConfig
from dtn.conf import make_rng
from dtn.errors import NonFiniteLossError
from dtn.errors import ShapeMismatchError
from dtn.errors import TrainingError
from dtn.model import DeepTensorNetwork
from dtn.model import forward_classify
from dtn.model import forward_sequence
from dtn.tensor import Tape
from dtn.tensor import Tensor
from dtn.tensor import add
from dtn.tensor import backward
from dtn.tensor import mul
from dtn.training.losses import cross_entropy_l2
from dtn.training.losses import l2_penalty
from dtn.training.losses import l2_sequence_loss
from dtn.training.optim import OptimizerState
from dtn.training.optim import optimizer_step
from dtn.training.schedule import PlateauScheduler
from dtn.training.schedule import plateau_step

logger = logging.getLogger(__name__)

# maps a batch of raw inputs to features in [0, 1], e.g. resize and flatten
BatchTransform = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class Samples:
    """Inputs with their labels (classifier) or target sequences (decoder)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.targets):
            raise ShapeMismatchError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets"
            )
        if len(self.inputs) == 0:
            raise TrainingError("a sample set needs at least one sample")

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, indices: np.ndarray) -> Samples:
        return Samples(self.inputs[indices], self.targets[indices])


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_accuracy: float | None
    lr: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass(frozen=True)
class TrainResult:
    net: DeepTensorNetwork
    history: list[EpochRecord]


def _scoped_parameters(net: DeepTensorNetwork, config: TrainConfig) -> dict[str, Tensor]:
    params = net.parameters()
    if config.l2_scope == "head":
        return {name: params[name] for name in net.head_parameter_names()}
    return params


def _run(net: DeepTensorNetwork, inputs: Any) -> Tensor:
    return forward_classify(net, inputs) if net.is_classifier else forward_sequence(net, inputs)


def _objective(
    net: DeepTensorNetwork, outputs: Tensor, targets: np.ndarray, config: TrainConfig
) -> Tensor:
    scoped = _scoped_parameters(net, config)
    if net.is_classifier:
        return cross_entropy_l2(outputs, targets, scoped, config.l2)
    loss = l2_sequence_loss(outputs, targets)
    if config.l2 and scoped:
        loss = add(loss, mul(l2_penalty(scoped), config.l2))
    return loss


def batch_loss(
    net: DeepTensorNetwork, inputs: np.ndarray, targets: np.ndarray, config: TrainConfig
) -> Tensor:
    """Training objective of `net` on one batch of features."""
    return _objective(net, _run(net, inputs), targets, config)


def loss_and_grads(
    net: DeepTensorNetwork, inputs: np.ndarray, targets: np.ndarray, config: TrainConfig
) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    loss = batch_loss(net.bind(tape), inputs, targets, config)
    grads = backward(tape, loss)
    return loss.item(), {name: grad.data for name, grad in grads.items()}


def predict(net: DeepTensorNetwork, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits (classifier) or decoded sequences (decoder) for every input."""
    chunks = [
        _run(net, inputs[start : start + batch_size]).numpy()
        for start in range(0, len(inputs), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def round_cells(values: np.ndarray) -> np.ndarray:
    """Round decoded outputs to {0, 1}; exactly 0.5 rounds up."""
    return (values >= 0.5).astype(np.int64)


def score(net: DeepTensorNetwork, outputs: np.ndarray, targets: np.ndarray) -> float:
    if net.is_classifier:
        return float(np.mean(np.argmax(outputs, axis=-1) == targets))
    return float(np.mean(round_cells(outputs) == targets))


def evaluate(
    net: DeepTensorNetwork,
    samples: Samples,
    config: TrainConfig,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[float, float]:
    """Mean loss and accuracy (class or cell accuracy) over `samples`."""
    total, correct = 0.0, 0.0
    for start in range(0, len(samples), config.batch_size):
        batch = samples.take(np.arange(start, min(start + config.batch_size, len(samples))))
        inputs = batch.inputs if transform is None else transform(batch.inputs)
        outputs = _run(net, inputs)
        total += _objective(net, outputs, batch.targets, config).item() * len(batch)
        correct += score(net, outputs.data, batch.targets) * len(batch)
    return total / len(samples), correct / len(samples)


def _batches(
    groups: Sequence[Samples], batch_size: int, rng: np.random.Generator
) -> list[tuple[int, np.ndarray]]:
    batches = []
    for index, group in enumerate(groups):
        order = rng.permutation(len(group))
        batches.extend(
            (index, order[start : start + batch_size])
            for start in range(0, len(group), batch_size)
        )
    rng.shuffle(batches)
    return batches


def train(
    net: DeepTensorNetwork,
    data: Samples | Sequence[Samples],
    config: TrainConfig,
    *,
    validation: Samples | None = None,
    history_path: Path | None = None,
    batch_transform: BatchTransform | None = None,
    eval_transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TrainResult:
    """Mini-batch training with the configured optimizer and plateau schedule.

    `data` may hold several sample groups of different input lengths (a uniform
    network trains on all of them); each batch comes from a single group. The
    plateau rule watches validation loss, or training loss without validation.
    """
    groups = [data] if isinstance(data, Samples) else list(data)
    if not groups:
        raise TrainingError("no training data")
    rng = make_rng(config.seed)
    optimizer = OptimizerState.from_config(config)
    scheduler = PlateauScheduler(config.scheduler_gamma, config.scheduler_patience)
    params = {name: value.data for name, value in net.parameters().items()}
    history: list[EpochRecord] = []
    sink = history_path.open("w", encoding="utf-8") if history_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            seen, running = 0, 0.0
            for step, (group, indices) in enumerate(_batches(groups, config.batch_size, rng)):
                batch = groups[group].take(indices)
                inputs = batch.inputs
                if batch_transform is not None:
                    inputs = batch_transform(inputs, rng)
                loss, grads = loss_and_grads(net, inputs, batch.targets, config)
                if not math.isfinite(loss):
                    logger.error("non-finite loss at epoch %d, batch %d", epoch, step)
                    raise NonFiniteLossError(
                        f"loss became {loss} at epoch {epoch}, batch {step}; "
                        f"try a lower learning rate (lr={optimizer.lr:g})"
                    )
                logger.debug("epoch %d batch %d loss %.6g", epoch, step, loss)
                params, optimizer = optimizer_step(optimizer, params, grads)
                net = net.with_parameters(params)
                running += loss * len(batch)
                seen += len(batch)
            train_loss = running / seen
            val_loss = val_accuracy = None
            if validation is not None:
                val_loss, val_accuracy = evaluate(net, validation, config, eval_transform)
            record = EpochRecord(epoch, train_loss, val_loss, val_accuracy, optimizer.lr)
            history.append(record)
            if sink is not None:
                sink.write(record.to_json() + "\n")
                sink.flush()
            logger.info(
                "epoch %d train_loss=%.6g val_loss=%s val_accuracy=%s lr=%.3g",
                epoch,
                train_loss,
                "-" if val_loss is None else f"{val_loss:.6g}",
                "-" if val_accuracy is None else f"{val_accuracy:.4f}",
                optimizer.lr,
            )
            metric = train_loss if val_loss is None else val_loss
            lr, scheduler = plateau_step(scheduler, metric, optimizer.lr)
            optimizer = optimizer.with_lr(lr)
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(net, history)


def kfold_indices(
    count: int, folds: int, rng: np.random.Generator, labels: Any = None
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, validation) index pairs; every index lands in exactly one
    validation fold. With `labels`, each class is spread evenly over folds."""
    if not 2 <= folds <= count:
        raise TrainingError(f"need 2 <= folds <= {count}, got {folds}")
    assignment = np.empty(count, dtype=np.int64)
    if labels is None:
        groups = [rng.permutation(count)]
    else:
        labels = np.asarray(labels)
        groups = [
            rng.permutation(np.flatnonzero(labels == label)) for label in np.unique(labels)
        ]
    offset = 0
    for members in groups:
        assignment[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return [
        (np.flatnonzero(assignment != fold), np.flatnonzero(assignment == fold))
        for fold in range(folds)
    ]
