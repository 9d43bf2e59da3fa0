from __future__ import annotations

import itertools

import numpy as np
import pytest

from dtn.automaton import CaTask
from dtn.automaton import all_states
from dtn.automaton import ca_step
from dtn.automaton import evaluate
from dtn.automaton import evaluation_set
from dtn.automaton import evolve
from dtn.automaton import generalization_sweep
from dtn.automaton import generate_dataset
from dtn.automaton import load_dataset
from dtn.automaton import rule_table
from dtn.automaton import save_dataset
from dtn.automaton import train_ca_model
from dtn.automaton import write_sweep_csv
from dtn.conf import TrainConfig
from dtn.errors import AutomatonError
from dtn.errors import DatasetError
from dtn.model import DeepTensorNetwork
from dtn.model import build_network
from dtn.training.trainer import score

from .utils import ca_step_loop
from .utils import rule_bit

# centre bit copied: the identity automaton
IDENTITY_RULE = 204


@pytest.mark.parametrize("rule", [0, 30, 90, 110, 184, 255])
def test_rule_table_matches_bit_shifts(rule):
    table = rule_table(rule)
    for left in (0, 1):
        for centre in (0, 1):
            for right in (0, 1):
                assert table[left, centre, right] == rule_bit(rule, left, centre, right)


@pytest.mark.parametrize(
    "state,expected",
    [
        ([0, 0, 0, 0, 0], [0, 0, 0, 0, 0]),
        ([0, 0, 1, 0, 0], [0, 1, 1, 1, 0]),
        ([1, 0, 0, 0, 0], [1, 1, 0, 0, 1]),
    ],
)
def test_rule_30_step(state, expected):
    np.testing.assert_array_equal(ca_step(state, 30), expected)


@pytest.mark.parametrize("left,centre,right", list(itertools.product((0, 1), repeat=3)))
def test_rule_30_is_left_xor_centre_or_right(left, centre, right):
    assert rule_table(30)[left, centre, right] == left ^ (centre | right)
    state = np.array([0, left, centre, right, 0])
    assert ca_step(state, 30)[2] == left ^ (centre | right)


@pytest.mark.parametrize("steps", [1, 2, 3])
@pytest.mark.parametrize("shift", [1, 3, -2])
def test_targets_commute_with_cyclic_shifts(rng, steps, shift):
    task = CaTask(steps=steps, width=7)
    samples = generate_dataset(task, count=64, rng=rng)
    shifted = np.roll(samples.inputs, shift, axis=-1)
    np.testing.assert_array_equal(
        evolve(shifted.astype(np.uint8), task.rule, steps), np.roll(samples.targets, shift, axis=-1)
    )


def test_step_rejects_non_binary_cells():
    with pytest.raises(AutomatonError):
        ca_step([0, 2, 1], 30)


@pytest.mark.parametrize("kwargs", [{"rule": 256}, {"steps": 0}, {"width": 2}])
def test_task_validation(kwargs):
    with pytest.raises(AutomatonError):
        CaTask(**kwargs)


def test_exhaustive_dataset_has_every_state():
    samples = generate_dataset(CaTask(width=3))
    assert len(samples) == 8
    assert len({tuple(row) for row in samples.inputs}) == 8


def test_two_step_targets_compose():
    samples = generate_dataset(CaTask(rule=30, steps=2, width=6))
    for x, y in zip(samples.inputs.astype(int), samples.targets):
        np.testing.assert_array_equal(y, ca_step(ca_step(x, 30), 30))


@pytest.mark.parametrize("rule", [30, 54, 110])
def test_pairs_agree_with_loop_implementation(rule, rng):
    samples = generate_dataset(CaTask(rule=rule, steps=3, width=9), count=50, rng=rng)
    for x, y in zip(samples.inputs.astype(int), samples.targets):
        state = list(x)
        for _ in range(3):
            state = ca_step_loop(state, rule)
        assert list(y) == state


def test_all_states_order():
    np.testing.assert_array_equal(all_states(2), [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_exhaustive_width_limit():
    with pytest.raises(AutomatonError):
        generate_dataset(CaTask(width=20))


def test_perfect_predictor_solves_the_task():
    samples = generate_dataset(CaTask(rule=IDENTITY_RULE, width=5))
    result = evaluate(DeepTensorNetwork(), samples)
    assert result.accuracy == 1.0
    assert result.solved
    assert result.sequences == 32


def test_constant_zero_predictor_scores_zero_fraction():
    samples = generate_dataset(CaTask(rule=30, width=3))
    expected = sum(
        cell == 0 for state in all_states(3) for cell in ca_step_loop(list(state), 30)
    ) / 24
    zeros = np.zeros(samples.targets.shape)
    assert score(DeepTensorNetwork(), zeros, samples.targets) == pytest.approx(expected)


def test_one_wrong_cell_is_not_solved():
    samples = generate_dataset(CaTask(rule=30, width=5))
    result = evaluate(DeepTensorNetwork(), samples)
    assert not result.solved
    assert result.accuracy < 1.0


def test_evaluation_set_samples_large_widths():
    task = CaTask(width=30)
    first = evaluation_set(task, seed=1)
    second = evaluation_set(task, seed=1)
    np.testing.assert_array_equal(first.inputs, second.inputs)
    assert first.inputs.shape[1] == 30


def test_sweep_covers_every_width(tmp_path):
    rows = generalization_sweep(
        DeepTensorNetwork(), CaTask(rule=IDENTITY_RULE), range(5, 101), exhaustive_max=8
    )
    assert [row.width for row in rows] == list(range(5, 101))
    assert all(row.solved and row.accuracy == 1.0 for row in rows)
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "N,accuracy,solved"
    assert len(lines) == 97
    assert lines[1] == "5,1.000000,true"


def test_sweep_needs_uniform_network(rng):
    net = build_network(rng, depth=1, mpo_bond_dim=2, sites=5)
    with pytest.raises(AutomatonError):
        generalization_sweep(net, CaTask(), [5, 6])


def test_dataset_cache_round_trip(tmp_path, rng):
    small = generate_dataset(CaTask(width=4))
    large = generate_dataset(CaTask(width=7), count=10, rng=rng)
    first, second = tmp_path / "cache" / "a.txt", tmp_path / "cache" / "b.txt"
    save_dataset(small, first)
    save_dataset(large, second)
    path = tmp_path / "cache" / "ca.txt"
    path.write_text(
        first.read_text(encoding="utf-8") + "\n" + second.read_text(encoding="utf-8"),
        encoding="utf-8",
    )
    groups = load_dataset(path)
    assert [group.inputs.shape for group in groups] == [(16, 4), (10, 7)]
    np.testing.assert_array_equal(groups[0].targets, small.targets)
    np.testing.assert_array_equal(groups[1].inputs, large.inputs)


@pytest.mark.parametrize("line", ["5 0101 01010\n", "3 012 010\n", "x 000 000\n", "3 000\n"])
def test_dataset_cache_rejects_malformed_records(tmp_path, line):
    path = tmp_path / "bad.txt"
    path.write_text(line, encoding="utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_evolve_matches_repeated_steps(rng):
    state = rng.integers(0, 2, size=11)
    expected = state
    for _ in range(4):
        expected = ca_step(expected, 110)
    np.testing.assert_array_equal(evolve(state, 110, 4), expected)


def test_short_training_run_improves_fit():
    task = CaTask(rule=30, steps=1, width=5)
    config = TrainConfig(epochs=30, lr=0.05, optimizer="adam", seed=2)
    result = train_ca_model(task, [5, 6], config, bond_dim=2, noise=0.2)
    assert result.net.uniform
    assert result.history[-1].train_loss < result.history[0].train_loss
