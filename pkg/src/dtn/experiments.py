"""Reproduction experiments with Markdown and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dtn.automaton import CaTask
from dtn.automaton import evaluate as evaluate_ca
from dtn.automaton import evaluation_set
from dtn.automaton import train_ca_model
from dtn.conf import TrainConfig
from dtn.datasets import ImageDataset
from dtn.errors import ConfigurationError
from dtn.images import ImageModelSpec
from dtn.images import Member
from dtn.images import accuracy
from dtn.images import ensemble_accuracy
from dtn.images import member_logits
from dtn.images import scaled_sizes
from dtn.images import train_image_model
from dtn.model import DeepTensorNetwork

logger = logging.getLogger(__name__)

# returned by the bond search when no bond dimension in the range solves
NOT_FOUND = None
DEFAULT_CA_WIDTHS = tuple(range(5, 11))
# relative size change at which the robustness comparison is made
ROBUSTNESS_SHIFT = 0.1


@dataclass(frozen=True)
class Outcome:
    label: str
    seed: int
    value: float
    passed: bool | None = None


@dataclass(frozen=True)
class ExperimentReport:
    experiment: str
    config: dict[str, Any]
    outcomes: tuple[Outcome, ...]
    result: Any = None
    passed: bool | None = None

    def summary(self) -> dict[str, tuple[float, float, int]]:
        """(mean, std, count) of the outcome values per label."""
        groups: dict[str, list[float]] = {}
        for outcome in self.outcomes:
            groups.setdefault(outcome.label, []).append(outcome.value)
        return {
            label: (float(np.mean(values)), float(np.std(values)), len(values))
            for label, values in groups.items()
        }

    def to_markdown(self) -> str:
        lines = [f"# {self.experiment}", ""]
        if self.result is not None:
            lines += [f"Result: {self.result}", ""]
        if self.passed is not None:
            lines += [f"Acceptance: {'pass' if self.passed else 'FAIL'}", ""]
        lines += ["| label | mean | std | runs |", "| --- | --- | --- | --- |"]
        for label, (mean, std, count) in self.summary().items():
            lines.append(f"| {label} | {mean:.4f} | {std:.4f} | {count} |")
        lines += ["", "## Configuration", "", "```json"]
        lines += [json.dumps(self.config, indent=2, sort_keys=True), "```", ""]
        return "\n".join(lines)

    def write(self, directory: Path) -> tuple[Path, Path]:
        directory.mkdir(parents=True, exist_ok=True)
        markdown = directory / f"{self.experiment}.md"
        table = directory / f"{self.experiment}.csv"
        markdown.write_text(self.to_markdown(), encoding="utf-8")
        with table.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "seed", "value", "passed"])
            for outcome in self.outcomes:
                passed = "" if outcome.passed is None else str(outcome.passed).lower()
                writer.writerow([outcome.label, outcome.seed, f"{outcome.value:.6f}", passed])
        logger.info("wrote %s and %s", markdown, table)
        return markdown, table


def run_min_bond_search(
    steps: int,
    layers: int,
    bond_dims: Sequence[int],
    config: TrainConfig,
    *,
    seeds: int = 10,
    widths: Sequence[int] = DEFAULT_CA_WIDTHS,
    rule: int = 30,
) -> ExperimentReport:
    """Smallest bond dimension that solves the `steps`-step automaton.

    Bond dimensions are tried in increasing order with up to `seeds` restarts
    each; the search stops at the first one that solves every width.
    """
    task = CaTask(rule=rule, steps=steps, width=min(widths))
    outcomes = []
    found = NOT_FOUND
    for bond_dim in sorted(bond_dims):
        for offset in range(seeds):
            seed = config.seed + offset
            result = train_ca_model(
                task, widths, config.merged({"seed": seed}), bond_dim=bond_dim, depth=layers
            )
            evaluations = [
                evaluate_ca(result.net, evaluation_set(task.at_width(width), seed=seed))
                for width in widths
            ]
            solved = all(evaluation.solved for evaluation in evaluations)
            worst = min(evaluation.accuracy for evaluation in evaluations)
            outcomes.append(Outcome(f"D={bond_dim}", seed, worst, solved))
            logger.info(
                "steps=%d layers=%d D=%d seed=%d accuracy=%.4f solved=%s",
                steps,
                layers,
                bond_dim,
                seed,
                worst,
                solved,
            )
            if solved:
                found = bond_dim
                break
        if found is not NOT_FOUND:
            break
    return ExperimentReport(
        experiment=f"min-bond-j{steps}-l{layers}",
        config={
            "steps": steps,
            "layers": layers,
            "rule": rule,
            "bond_dims": list(bond_dims),
            "seeds": seeds,
            "widths": list(widths),
            "train": config.to_dict(),
        },
        outcomes=tuple(outcomes),
        result=found if found is not NOT_FOUND else "not found",
        passed=found is not NOT_FOUND,
    )


def run_depth_sweep(
    train_set: ImageDataset,
    test_set: ImageDataset,
    depths: Sequence[int],
    spec: ImageModelSpec,
    config: TrainConfig,
    *,
    seeds: int = 5,
    tolerance: float = 0.01,
) -> ExperimentReport:
    """Test accuracy of identical models at every depth.

    Passes when one layer does not lower the mean accuracy of the plain MPS
    classifier by more than `tolerance`.
    """
    outcomes = []
    for depth in depths:
        depth_spec = dataclasses.replace(spec, depth=depth)
        for offset in range(seeds):
            seed = config.seed + offset
            result = train_image_model(train_set, depth_spec, config.merged({"seed": seed}))
            value = accuracy(member_logits(Member(result.net), test_set), test_set.labels)
            logger.info("depth=%d seed=%d test accuracy %.4f", depth, seed, value)
            outcomes.append(Outcome(f"depth={depth}", seed, value))
    report = ExperimentReport(
        experiment="depth-sweep",
        config={
            "depths": list(depths),
            "seeds": seeds,
            "model": dataclasses.asdict(spec),
            "train": config.to_dict(),
            "train_size": len(train_set),
            "test_size": len(test_set),
        },
        outcomes=tuple(outcomes),
    )
    summary = report.summary()
    if "depth=0" in summary and "depth=1" in summary:
        gap = summary["depth=1"][0] - summary["depth=0"][0]
        return dataclasses.replace(
            report,
            result=f"depth 1 - depth 0 mean accuracy = {gap:+.4f}",
            passed=gap >= -tolerance,
        )
    return report


def robustness_curve(
    net: DeepTensorNetwork, dataset: ImageDataset, sizes: Sequence[tuple[int, int]]
) -> list[float]:
    """Accuracy of a uniform classifier at every (height, width)."""
    if not net.uniform:
        raise ConfigurationError("only a uniform model can be evaluated at other sizes")
    values = []
    for size in sizes:
        value = accuracy(member_logits(Member(net), dataset, size), dataset.labels)
        logger.info("size %dx%d accuracy %.4f", *size, value)
        values.append(value)
    return values


def run_robustness_sweep(
    models: Mapping[str, DeepTensorNetwork],
    dataset: ImageDataset,
    scales: Sequence[float],
) -> ExperimentReport:
    """Accuracy curves of several uniform models over rescaled test images.

    With a `fixed` and a `range` model, passes when the range-trained model
    loses less accuracy at a ±10% size change.
    """
    sizes = scaled_sizes(dataset.height, dataset.width, scales)
    outcomes = []
    curves = {}
    for name, net in models.items():
        curves[name] = dict(zip(scales, robustness_curve(net, dataset, sizes)))
        outcomes += [
            Outcome(f"{name} x{scale:g}", 0, value) for scale, value in curves[name].items()
        ]
    report = ExperimentReport(
        experiment="robustness",
        config={
            "models": sorted(models),
            "scales": list(scales),
            "sizes": [list(size) for size in sizes],
            "test_size": len(dataset),
        },
        outcomes=tuple(outcomes),
    )
    drops = {name: _size_drop(curve) for name, curve in curves.items()}
    if drops.get("fixed") is not None and drops.get("range") is not None:
        return dataclasses.replace(
            report,
            result=f"drop at ±10%: fixed {drops['fixed']:.4f}, range {drops['range']:.4f}",
            passed=drops["range"] < drops["fixed"],
        )
    return report


def _size_drop(curve: Mapping[float, float]) -> float | None:
    if 1.0 not in curve:
        return None
    shifted = [
        value for scale, value in curve.items() if np.isclose(abs(scale - 1.0), ROBUSTNESS_SHIFT)
    ]
    if not shifted:
        return None
    return curve[1.0] - float(np.mean(shifted))


def run_ensemble_eval(members: Sequence[Member], dataset: ImageDataset) -> ExperimentReport:
    """Accuracy of each member against the logit-averaged ensemble."""
    singles, combined = ensemble_accuracy(members, dataset)
    outcomes = [Outcome("member", index, value) for index, value in enumerate(singles)]
    outcomes.append(Outcome("ensemble", 0, combined))
    logger.info(
        "ensemble of %d: members mean %.4f, ensemble %.4f",
        len(members),
        float(np.mean(singles)),
        combined,
    )
    return ExperimentReport(
        experiment="ensemble",
        config={
            "members": len(members),
            "permute_seeds": [member.permute_seed for member in members],
            "test_size": len(dataset),
        },
        outcomes=tuple(outcomes),
        result=f"ensemble accuracy {combined:.4f}",
    )

