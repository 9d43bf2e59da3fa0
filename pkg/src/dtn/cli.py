from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from dtn import __version__
from dtn.attention import permutation_mpo_matches
from dtn.attention import verify_sweep
from dtn.automaton import EXHAUSTIVE_MAX_WIDTH
from dtn.automaton import CaTask
from dtn.automaton import evaluate as evaluate_ca
from dtn.automaton import evaluation_set
from dtn.automaton import generalization_sweep
from dtn.automaton import train_ca_model
from dtn.automaton import write_sweep_csv
from dtn.bench import check_scaling
from dtn.bench import doubling_ratios
from dtn.bench import r_squared_by_bond
from dtn.bench import run_bench
from dtn.bench import write_bench_csv
from dtn.checkpoint import load_checkpoint
from dtn.checkpoint import save_checkpoint
from dtn.conf import PRESETS
from dtn.conf import TrainConfig
from dtn.conf import load_config
from dtn.conf import make_rng
from dtn.datasets import IDENTITY_SEED
from dtn.datasets import apply_permutation
from dtn.errors import ConfigError
from dtn.errors import DtnError
from dtn.experiments import ExperimentReport
from dtn.experiments import run_depth_sweep
from dtn.experiments import run_ensemble_eval
from dtn.experiments import run_min_bond_search
from dtn.experiments import run_robustness_sweep
from dtn.images import DEFAULT_TEST_SIZE
from dtn.images import DEFAULT_TRAIN_SIZE
from dtn.images import ENSEMBLE_MODES
from dtn.images import ImageModelSpec
from dtn.images import Member
from dtn.images import aspect_sizes
from dtn.images import ensemble_accuracy
from dtn.images import load_split
from dtn.images import scaled_sizes
from dtn.images import train_folds
from dtn.images import train_image_model
from dtn.images import write_ensemble_csv
from dtn.log import setup_logging
from dtn.model import build_network
from dtn.mpo import ACTIVATIONS
from dtn.training.gradcheck import grad_check

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

GRAD_TOLERANCE = {"matrix_exp": 1e-4}
DEFAULT_GRAD_TOLERANCE = 1e-5
ROBUSTNESS_SCALES = (0.8, 0.9, 1.0, 1.1, 1.2)
ASPECTS = (0.75, 1.0, 1.33)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    setup_logging(args.verbose - args.quiet, args.log_file)
    try:
        return args.handler(args)
    except DtnError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="dtn", description="Deep tensor networks: MPO layers with an MPS head."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="count", default=0)
    parser.add_argument("--log-file", type=Path)
    parser.add_argument("--config", type=Path, help="TOML file with training settings")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    commands = parser.add_subparsers(dest="command", required=True)

    train_ca = commands.add_parser("train-ca", help="train a uniform automaton model")
    _task_arguments(train_ca)
    train_ca.add_argument("--width", type=int, default=5)
    train_ca.add_argument("--width-range", type=int_list)
    train_ca.add_argument("--d-mpo", type=int, default=2)
    train_ca.add_argument("--layers", type=int, default=1)
    train_ca.add_argument("--activation", choices=ACTIVATIONS, default="sigmoid")
    train_ca.add_argument("--residual", action="store_true")
    train_ca.add_argument("--normalize", action="store_true")
    train_ca.add_argument("--seeds", type=int, default=1, help="restarts; the first solving run wins")
    _training_arguments(train_ca)
    train_ca.add_argument("--out", type=Path, required=True)
    train_ca.set_defaults(handler=cmd_train_ca, preset_default="ca")

    eval_ca = commands.add_parser("eval-ca", help="evaluate an automaton model across widths")
    eval_ca.add_argument("--checkpoint", type=Path, required=True)
    eval_ca.add_argument("--rule", type=int)
    eval_ca.add_argument("--steps", type=int)
    eval_ca.add_argument("--width-range", type=int_list, default=list(range(5, 101)))
    eval_ca.add_argument("--exhaustive-max", type=int, default=EXHAUSTIVE_MAX_WIDTH)
    eval_ca.add_argument("--csv-out", type=Path)
    eval_ca.set_defaults(handler=cmd_eval_ca)

    train_image = commands.add_parser("train-image", help="train an image classifier")
    _image_data_arguments(train_image)
    train_image.add_argument("--subset-size", type=int, default=DEFAULT_TRAIN_SIZE)
    train_image.add_argument("--test-size", type=int, default=DEFAULT_TEST_SIZE)
    train_image.add_argument("--permute-seed", type=int, default=IDENTITY_SEED)
    _image_model_arguments(train_image)
    train_image.add_argument("--resize-range", type=int_range)
    train_image.add_argument("--folds", type=int)
    train_image.add_argument("--ensemble", choices=ENSEMBLE_MODES, default="same")
    _training_arguments(train_image)
    train_image.add_argument("--out", type=Path, required=True)
    train_image.set_defaults(handler=cmd_train_image)

    eval_image = commands.add_parser("eval-image", help="evaluate classifiers or an ensemble")
    eval_image.add_argument("--checkpoint", type=Path, nargs="+", required=True)
    _image_data_arguments(eval_image)
    eval_image.add_argument("--test-size", type=int, default=DEFAULT_TEST_SIZE)
    eval_image.add_argument("--resize", type=size)
    eval_image.add_argument("--aspect-sweep", action="store_true")
    eval_image.add_argument("--csv-out", type=Path)
    eval_image.set_defaults(handler=cmd_eval_image)

    attention = commands.add_parser("verify-attention", help="check the attention identities")
    attention.add_argument("--n-range", type=int_list, default=list(range(3, 9)))
    attention.add_argument("--d-range", type=int_list, default=[2, 3, 4])
    attention.add_argument("--trials", type=int, default=100)
    attention.add_argument("--tolerance", type=float, default=1e-10)
    attention.add_argument("--seed", type=int, default=0)
    attention.set_defaults(handler=cmd_verify_attention)

    gradient = commands.add_parser("grad-check", help="compare gradients to finite differences")
    gradient.add_argument("--sites", type=int, default=5)
    gradient.add_argument("--d-mpo", type=int, default=3)
    gradient.add_argument("--layers", type=int, default=1)
    gradient.add_argument("--per-parameter", type=int, default=4)
    gradient.add_argument("--seed", type=int, default=0)
    gradient.set_defaults(handler=cmd_grad_check)

    bench = commands.add_parser("bench", help="time MPO forward passes")
    bench.add_argument("--n-range", type=int_list, default=[16, 32, 64, 128, 256, 512])
    bench.add_argument("--d-mpo-range", type=int_list, default=[8, 16])
    bench.add_argument("--rank-g", type=int, default=1)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--csv-out", type=Path)
    bench.add_argument("--check", action="store_true", help="exit 1 unless scaling holds")
    bench.set_defaults(handler=cmd_bench)

    experiment = commands.add_parser("experiment", help="run a reproduction experiment")
    experiments = experiment.add_subparsers(dest="experiment", required=True)

    min_bond = experiments.add_parser("min-bond")
    _task_arguments(min_bond)
    min_bond.add_argument("--layers", type=int, default=1)
    min_bond.add_argument("--d-range", type=int_list, default=list(range(2, 9)))
    min_bond.add_argument("--seeds", type=int, default=10)
    min_bond.add_argument("--width-range", type=int_list, default=list(range(5, 11)))
    _training_arguments(min_bond)
    min_bond.set_defaults(handler=cmd_min_bond, preset_default="ca")

    depth = experiments.add_parser("depth")
    _image_data_arguments(depth)
    depth.add_argument("--subset-size", type=int, default=DEFAULT_TRAIN_SIZE)
    depth.add_argument("--test-size", type=int, default=DEFAULT_TEST_SIZE)
    depth.add_argument("--depths", type=int_list, default=[0, 1])
    depth.add_argument("--seeds", type=int, default=5)
    _image_model_arguments(depth)
    _training_arguments(depth)
    depth.set_defaults(handler=cmd_depth)

    robustness = experiments.add_parser("robustness")
    _image_data_arguments(robustness)
    robustness.add_argument("--subset-size", type=int, default=DEFAULT_TRAIN_SIZE)
    robustness.add_argument("--test-size", type=int, default=DEFAULT_TEST_SIZE)
    robustness.add_argument("--resize-range", type=int_range, default=(20, 36))
    robustness.add_argument("--scales", type=float_list, default=list(ROBUSTNESS_SCALES))
    _image_model_arguments(robustness)
    _training_arguments(robustness)
    robustness.set_defaults(handler=cmd_robustness, uniform=True)

    for sub in (min_bond, depth, robustness):
        sub.add_argument("--out-dir", type=Path, default=Path("reports"))

    return parser.parse_args(argv)


def _task_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rule", type=int, default=30)
    parser.add_argument("--steps", type=int, default=1)


def _training_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--history", type=Path, help="JSON-lines file of epoch metrics")


def _image_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", choices=("mnist", "fashion"), default="mnist")
    parser.add_argument("--data-dir", type=Path, required=True)


def _image_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d-mps", type=int, default=20)
    parser.add_argument("--d-mpo", type=int, default=10)
    parser.add_argument("--layers", type=int, default=0)
    parser.add_argument("--activation", choices=ACTIVATIONS, default="matrix_exp")
    parser.add_argument("--uniform", action="store_true")


def int_list(text: str) -> list[int]:
    """`a:b` (inclusive), `a:b:step` or a comma separated list."""
    try:
        if ":" in text:
            parts = [int(part) for part in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError(text)
            step = parts[2] if len(parts) == 3 else 1
            return list(range(parts[0], parts[1] + 1, step))
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer range or list: {text!r}") from exc


def int_range(text: str) -> tuple[int, int]:
    values = text.split(":")
    try:
        low, high = (int(value) for value in values)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}") from exc
    if low > high:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return low, high


def float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from exc


def size(text: str) -> tuple[int, int]:
    try:
        height, width = (int(value) for value in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from exc
    return height, width


def resolve_config(args: argparse.Namespace, preset: str | None = None) -> TrainConfig:
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "folds": getattr(args, "folds", None),
    }
    preset = args.preset or preset or getattr(args, "preset_default", None)
    return load_config(args.config, preset=preset, overrides=overrides)


def _report(report: ExperimentReport, out_dir: Path) -> int:
    report.write(out_dir)
    print(report.to_markdown())
    return EXIT_FAILED if report.passed is False else EXIT_OK


def _seed_history(path: Path | None, seed: int, runs: int) -> Path | None:
    """`history.jsonl` becomes `history-seed3.jsonl` when several seeds run."""
    if path is None or runs == 1:
        return path
    return path.with_name(f"{path.stem}-seed{seed}{path.suffix}")


def cmd_train_ca(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    task = CaTask(rule=args.rule, steps=args.steps, width=args.width)
    widths = args.width_range or [args.width]
    best = None
    for offset in range(args.seeds):
        run_config = config.merged({"seed": config.seed + offset})
        result = train_ca_model(
            task,
            widths,
            run_config,
            bond_dim=args.d_mpo,
            depth=args.layers,
            activation=args.activation,
            residual=args.residual,
            normalize_output=args.normalize,
            history_path=_seed_history(args.history, run_config.seed, args.seeds),
        )
        evaluations = [
            evaluate_ca(result.net, evaluation_set(task.at_width(width), seed=run_config.seed))
            for width in widths
        ]
        worst = min(evaluation.accuracy for evaluation in evaluations)
        solved = all(evaluation.solved for evaluation in evaluations)
        print(f"seed {run_config.seed}: accuracy {worst:.6f} solved {str(solved).lower()}")
        if best is None or worst > best[0]:
            best = (worst, result.net, run_config)
        if solved:
            break
    assert best is not None
    _, net, run_config = best
    save_checkpoint(
        net,
        args.out,
        seed=run_config.seed,
        config={
            "train": run_config.to_dict(),
            "task": {"rule": task.rule, "steps": task.steps},
            "widths": widths,
        },
    )
    return EXIT_OK


def cmd_eval_ca(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    stored = (checkpoint.config or {}).get("task", {})
    rule = args.rule if args.rule is not None else stored.get("rule", 30)
    steps = args.steps if args.steps is not None else stored.get("steps", 1)
    task = CaTask(rule=rule, steps=steps, width=min(args.width_range))
    rows = generalization_sweep(
        checkpoint.net, task, args.width_range, exhaustive_max=args.exhaustive_max
    )
    for row in rows:
        print(f"N={row.width} accuracy={row.accuracy:.6f} solved={str(row.solved).lower()}")
    if args.csv_out is not None:
        write_sweep_csv(rows, args.csv_out)
    return EXIT_OK if all(row.solved for row in rows) else EXIT_FAILED


def _image_spec(args: argparse.Namespace) -> ImageModelSpec:
    return ImageModelSpec(
        head_bond_dim=args.d_mps,
        mpo_bond_dim=args.d_mpo,
        depth=args.layers,
        uniform=args.uniform,
        activation=args.activation,
    )


def _image_snapshot(
    args: argparse.Namespace, config: TrainConfig, permute_seed: int
) -> dict[str, Any]:
    return {
        "train": config.to_dict(),
        "dataset": args.dataset,
        "permute_seed": permute_seed,
    }


def cmd_train_image(args: argparse.Namespace) -> int:
    config = resolve_config(args, preset=args.dataset)
    spec = _image_spec(args)
    train_set = load_split(args.data_dir, "train", args.subset_size, config.seed)
    test_set = load_split(args.data_dir, "test", args.test_size, config.seed)
    if config.folds > 1:
        if args.resize_range is not None:
            raise ConfigError("variable-size training is not combined with folds")
        members = train_folds(
            train_set, spec, config, permute_seed=args.permute_seed, ensemble=args.ensemble
        )
        for index, member in enumerate(members):
            path = args.out.with_name(f"{args.out.stem}-fold{index}{args.out.suffix}")
            snapshot = _image_snapshot(args, config, member.permute_seed)
            save_checkpoint(member.net, path, seed=config.seed + index, config=snapshot)
        report = run_ensemble_eval(members, test_set)
        print(report.to_markdown())
        return EXIT_OK
    if args.resize_range is not None and args.permute_seed != IDENTITY_SEED:
        raise ConfigError("variable-size training needs unpermuted images")
    result = train_image_model(
        apply_permutation(train_set, args.permute_seed),
        spec,
        config,
        validation=apply_permutation(test_set, args.permute_seed),
        resize_range=args.resize_range,
        history_path=args.history,
    )
    final = result.history[-1]
    print(f"test loss {final.val_loss:.6f} accuracy {final.val_accuracy:.4f}")
    save_checkpoint(
        result.net,
        args.out,
        seed=config.seed,
        config=_image_snapshot(args, config, args.permute_seed),
    )
    return EXIT_OK


def cmd_eval_image(args: argparse.Namespace) -> int:
    members = []
    for path in args.checkpoint:
        checkpoint = load_checkpoint(path)
        seed = (checkpoint.config or {}).get("permute_seed", IDENTITY_SEED)
        members.append(Member(checkpoint.net, seed))
    test_set = load_split(args.data_dir, "test", args.test_size)
    sizes: list[tuple[int, int] | None] = [args.resize]
    if args.aspect_sweep:
        height, width = args.resize or (test_set.height, test_set.width)
        sizes = [
            *scaled_sizes(height, width, ROBUSTNESS_SCALES),
            *aspect_sizes(height, width, ASPECTS),
        ]
    rows = []
    for target in sizes:
        singles, combined = ensemble_accuracy(members, test_set, target)
        shown = "native" if target is None else f"{target[0]}x{target[1]}"
        members_text = " ".join(f"{value:.4f}" for value in singles)
        print(f"{shown}: members {members_text} ensemble {combined:.4f}")
        rows.append((shown, singles, combined))
    if args.csv_out is not None:
        write_ensemble_csv(rows, args.csv_out)
    return EXIT_OK


def cmd_verify_attention(args: argparse.Namespace) -> int:
    rows = verify_sweep(args.n_range, args.d_range, args.trials, args.tolerance, args.seed)
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"N={row.sites} d={row.local_dim} max_deviation={row.max_deviation:.3e} {status}")
    exact = [
        permutation_mpo_matches(sites, d)
        for sites in args.n_range
        for d in args.d_range
        if sites <= 5 and d <= 3
    ]
    if exact:
        print(f"permutation MPO exact for {sum(exact)}/{len(exact)} small cases")
    passed = all(row.passed for row in rows) and all(exact)
    return EXIT_OK if passed else EXIT_FAILED


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    rng = make_rng(args.seed)
    inputs = rng.random((3, args.sites))
    failures = 0
    for activation in ACTIVATIONS:
        tolerance = GRAD_TOLERANCE.get(activation, DEFAULT_GRAD_TOLERANCE)
        for residual in (False, True):
            for normalize in (False, True):
                for classifier in (False, True):
                    net = build_network(
                        rng,
                        depth=args.layers,
                        mpo_bond_dim=args.d_mpo,
                        head_bond_dim=3 if classifier else None,
                        num_classes=3 if classifier else None,
                        mpo_noise=0.3,
                        head_noise=0.3,
                        activation=activation,
                        residual=residual,
                        normalize_output=normalize,
                    )
                    targets = (
                        rng.integers(0, 3, size=3)
                        if classifier
                        else rng.integers(0, 2, size=(3, args.sites))
                    )
                    error = grad_check(
                        net, inputs, targets, config, rng, per_parameter=args.per_parameter
                    )
                    status = "ok" if error < tolerance else "FAIL"
                    failures += error >= tolerance
                    print(
                        f"{activation:<10} residual={residual!s:<5} normalize={normalize!s:<5} "
                        f"head={classifier!s:<5} max_rel_error={error:.2e} {status}"
                    )
    return EXIT_OK if failures == 0 else EXIT_FAILED


def cmd_bench(args: argparse.Namespace) -> int:
    rows = run_bench(args.n_range, args.d_mpo_range, args.rank_g, args.repeats)
    for row in rows:
        print(f"N={row.sites} D={row.bond_dim} rank={row.rank} {row.seconds:.6f}s")
    for bond_dim, value in r_squared_by_bond(rows).items():
        print(f"D={bond_dim}: R^2 of linear fit in N = {value:.4f}")
    for (sites, bond_dim), ratio in doubling_ratios(rows).items():
        print(f"N={sites}: t(D={2 * bond_dim}) / t(D={bond_dim}) = {ratio:.2f}")
    if args.csv_out is not None:
        write_bench_csv(rows, args.csv_out)
    if args.check and not check_scaling(rows):
        return EXIT_FAILED
    return EXIT_OK


def cmd_min_bond(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    report = run_min_bond_search(
        args.steps,
        args.layers,
        args.d_range,
        config,
        seeds=args.seeds,
        widths=args.width_range,
        rule=args.rule,
    )
    return _report(report, args.out_dir)


def cmd_depth(args: argparse.Namespace) -> int:
    config = resolve_config(args, preset=args.dataset)
    train_set = load_split(args.data_dir, "train", args.subset_size, config.seed)
    test_set = load_split(args.data_dir, "test", args.test_size, config.seed)
    report = run_depth_sweep(
        train_set, test_set, args.depths, _image_spec(args), config, seeds=args.seeds
    )
    return _report(report, args.out_dir)


def cmd_robustness(args: argparse.Namespace) -> int:
    config = resolve_config(args, preset=args.dataset)
    spec = _image_spec(args)
    train_set = load_split(args.data_dir, "train", args.subset_size, config.seed)
    test_set = load_split(args.data_dir, "test", args.test_size, config.seed)
    fixed = train_image_model(train_set, spec, config, validation=test_set)
    ranged = train_image_model(
        train_set, spec, config, validation=test_set, resize_range=args.resize_range
    )
    report = run_robustness_sweep({"fixed": fixed.net, "range": ranged.net}, test_set, args.scales)
    return _report(report, args.out_dir)
