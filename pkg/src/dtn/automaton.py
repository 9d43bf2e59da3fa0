"""Elementary cellular automata as a sequence-prediction task.

Cells update from their (left, self, right) neighbourhood through the rule's
Wolfram-code truth table, with periodic wraparound.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from collections.abc import Iterable
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dtn.conf import TrainConfig
from dtn.conf import make_rng
from dtn.errors import AutomatonError
from dtn.errors import DatasetError
from dtn.model import DeepTensorNetwork
from dtn.model import build_network
from dtn.training.trainer import Samples
from dtn.training.trainer import TrainResult
from dtn.training.trainer import predict
from dtn.training.trainer import round_cells
from dtn.training.trainer import train

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_WIDTH = 14
# full-batch training below this width
FULL_BATCH_MAX_WIDTH = 12
SAMPLED_TEST_SIZE = 2048


@dataclass(frozen=True)
class CaTask:
    rule: int = 30
    steps: int = 1
    width: int = 5

    def __post_init__(self) -> None:
        if not 0 <= self.rule <= 255:
            raise AutomatonError(f"rule must be in [0, 255], got {self.rule}")
        if self.steps < 1:
            raise AutomatonError(f"steps must be >= 1, got {self.steps}")
        if self.width < 3:
            raise AutomatonError(f"width must be >= 3, got {self.width}")

    def at_width(self, width: int) -> CaTask:
        return dataclasses.replace(self, width=width)


@dataclass(frozen=True)
class CaEvaluation:
    accuracy: float
    solved: bool
    sequences: int


@dataclass(frozen=True)
class SweepRow:
    width: int
    accuracy: float
    solved: bool


def rule_table(rule: int) -> np.ndarray:
    """table[left, centre, right] for the given Wolfram code."""
    bits = np.unpackbits(np.array([rule], dtype=np.uint8), bitorder="little")
    return bits.reshape(2, 2, 2)


def ca_step(state: Any, rule: int = 30) -> np.ndarray:
    """One update of a state (N,) or a batch of states (B, N)."""
    cells = np.asarray(state)
    if not np.all((cells == 0) | (cells == 1)):
        raise AutomatonError("automaton states must contain only 0 and 1")
    cells = cells.astype(np.uint8)
    pad = [(0, 0)] * (cells.ndim - 1) + [(1, 1)]
    wrapped = np.pad(cells, pad, mode="wrap")
    return rule_table(rule)[wrapped[..., :-2], wrapped[..., 1:-1], wrapped[..., 2:]]


def evolve(state: Any, rule: int, steps: int) -> np.ndarray:
    cells = np.asarray(state)
    for _ in range(steps):
        cells = ca_step(cells, rule)
    return cells


def all_states(width: int) -> np.ndarray:
    codes = np.arange(2**width)[:, None]
    return ((codes >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8)


def generate_dataset(
    task: CaTask, count: int | None = None, rng: np.random.Generator | None = None
) -> Samples:
    """(input, j-step target) pairs: every state when `count` is None, else
    `count` uniformly random states."""
    if count is None:
        if task.width > EXHAUSTIVE_MAX_WIDTH:
            raise AutomatonError(
                f"exhaustive datasets stop at width {EXHAUSTIVE_MAX_WIDTH}, got {task.width}"
            )
        inputs = all_states(task.width)
    else:
        rng = rng if rng is not None else make_rng(0)
        inputs = rng.integers(0, 2, size=(count, task.width), dtype=np.uint8)
    targets = evolve(inputs, task.rule, task.steps)
    return Samples(inputs.astype(np.float64), targets.astype(np.int64))


def evaluation_set(
    task: CaTask, exhaustive_max: int = EXHAUSTIVE_MAX_WIDTH, seed: int = 0
) -> Samples:
    """All states up to `exhaustive_max`, else a fixed random sample."""
    if task.width <= exhaustive_max:
        return generate_dataset(task)
    return generate_dataset(task, SAMPLED_TEST_SIZE, make_rng(seed + task.width))


def evaluate(net: DeepTensorNetwork, samples: Samples, batch_size: int = 512) -> CaEvaluation:
    """Cell accuracy after rounding, and whether every sequence is exact."""
    predicted = round_cells(predict(net, samples.inputs, batch_size))
    correct = predicted == samples.targets
    return CaEvaluation(
        accuracy=float(np.mean(correct)),
        solved=bool(np.all(correct)),
        sequences=len(samples),
    )


def generalization_sweep(
    net: DeepTensorNetwork,
    task: CaTask,
    widths: Iterable[int],
    exhaustive_max: int = EXHAUSTIVE_MAX_WIDTH,
    seed: int = 0,
) -> list[SweepRow]:
    """Evaluate a uniform network at every width."""
    if not net.uniform:
        raise AutomatonError("only a uniform network can be evaluated at other widths")
    rows = []
    for width in widths:
        result = evaluate(net, evaluation_set(task.at_width(width), exhaustive_max, seed))
        logger.info("width %d accuracy %.6f solved %s", width, result.accuracy, result.solved)
        rows.append(SweepRow(width, result.accuracy, result.solved))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["N", "accuracy", "solved"])
        for row in rows:
            writer.writerow([row.width, f"{row.accuracy:.6f}", str(row.solved).lower()])


def _bits(values: np.ndarray) -> str:
    return "".join(str(int(v)) for v in values)


def save_dataset(samples: Samples, path: Path) -> None:
    """One `N input target` record per line, bitstrings of width N."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for inputs, targets in zip(samples.inputs, samples.targets):
            f.write(f"{len(inputs)} {_bits(inputs)} {_bits(targets)}\n")


def load_dataset(path: Path) -> list[Samples]:
    """Cached records grouped by width, in order of first appearance."""
    groups: dict[int, tuple[list[list[int]], list[list[int]]]] = {}
    with path.open(encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                width_text, state, target = line.split()
                width = int(width_text)
            except ValueError as exc:
                raise DatasetError(f"{path}:{number}: malformed record {line!r}") from exc
            if len(state) != width or len(target) != width or set(state + target) - {"0", "1"}:
                raise DatasetError(f"{path}:{number}: record does not match width {width}")
            inputs, targets = groups.setdefault(width, ([], []))
            inputs.append([int(c) for c in state])
            targets.append([int(c) for c in target])
    return [
        Samples(np.array(inputs, dtype=np.float64), np.array(targets, dtype=np.int64))
        for inputs, targets in groups.values()
    ]


def training_groups(task: CaTask, widths: Iterable[int], seed: int = 0) -> list[Samples]:
    groups = []
    for width in widths:
        sub_task = task.at_width(width)
        if width <= FULL_BATCH_MAX_WIDTH:
            groups.append(generate_dataset(sub_task))
        else:
            groups.append(generate_dataset(sub_task, SAMPLED_TEST_SIZE, make_rng(seed + width)))
    return groups


def train_ca_model(
    task: CaTask,
    widths: Sequence[int],
    config: TrainConfig,
    *,
    bond_dim: int = 2,
    depth: int = 1,
    activation: str = "sigmoid",
    residual: bool = False,
    normalize_output: bool = False,
    noise: float = 0.2,
    history_path: Path | None = None,
) -> TrainResult:
    """Train one uniform decoder network on every width in `widths`.

    Widths up to FULL_BATCH_MAX_WIDTH train full-batch on all states.
    """
    groups = training_groups(task, widths, config.seed)
    full = [len(group) for group in groups if group.inputs.shape[1] <= FULL_BATCH_MAX_WIDTH]
    if full:
        config = config.merged({"batch_size": max(config.batch_size, *full)})
    net = build_network(
        make_rng(config.seed),
        depth=depth,
        mpo_bond_dim=bond_dim,
        mpo_noise=noise,
        activation=activation,
        residual=residual,
        normalize_output=normalize_output,
    )
    logger.info(
        "training rule %d, %d step(s), D=%d depth=%d on widths %s (seed %d)",
        task.rule,
        task.steps,
        bond_dim,
        depth,
        list(widths),
        config.seed,
    )
    return train(net, groups, config, history_path=history_path)
