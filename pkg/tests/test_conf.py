from __future__ import annotations

import numpy as np
import pytest

from dtn.conf import PRESETS
from dtn.conf import TrainConfig
from dtn.conf import find_config_file
from dtn.conf import load_config
from dtn.conf import make_rng
from dtn.errors import ConfigError


def test_defaults_without_any_file(tmp_path):
    assert load_config(directory=tmp_path) == TrainConfig()


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_presets_apply(tmp_path, preset):
    config = load_config(preset=preset, directory=tmp_path)
    for key, value in PRESETS[preset].items():
        assert getattr(config, key) == value


def test_mnist_and_fashion_presets():
    assert PRESETS["mnist"]["lr"] == 0.00026
    assert PRESETS["mnist"]["optimizer"] == "adamw"
    assert PRESETS["fashion"]["lr"] == 8.1e-05
    assert PRESETS["fashion"]["optimizer"] == "adam"


def test_file_overrides_preset_and_flags_override_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('preset = "mnist"\nepochs = 7\nlr = 0.5\n', encoding="utf-8")
    config = load_config(path, overrides={"lr": 0.25, "seed": None})
    assert config.epochs == 7
    assert config.lr == 0.25
    assert config.l2 == PRESETS["mnist"]["l2"]
    assert config.seed == 0


def test_explicit_preset_beats_file_preset(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('preset = "mnist"\n', encoding="utf-8")
    assert load_config(path, preset="fashion").optimizer == "adam"


def test_dtn_toml_is_found_before_pyproject(tmp_path):
    (tmp_path / "dtn.toml").write_text("epochs = 3\n", encoding="utf-8")
    (tmp_path / "pyproject.toml").write_text("[tool.dtn]\nepochs = 9\n", encoding="utf-8")
    assert find_config_file(tmp_path) == tmp_path / "dtn.toml"
    assert load_config(directory=tmp_path).epochs == 3


def test_pyproject_tool_table(tmp_path):
    (tmp_path / "pyproject.toml").write_text(
        '[project]\nname = "x"\n\n[tool.dtn]\nbatch_size = 16\nlr = 1\n', encoding="utf-8"
    )
    config = load_config(directory=tmp_path)
    assert config.batch_size == 16
    assert config.lr == 1.0


def test_pyproject_without_table_is_ignored(tmp_path):
    (tmp_path / "pyproject.toml").write_text('[project]\nname = "x"\n', encoding="utf-8")
    assert find_config_file(tmp_path) is None


@pytest.mark.parametrize(
    "text",
    [
        "epochz = 3\n",
        'epochs = "3"\n',
        "epochs = 0\n",
        "scheduler_gamma = 1.0\n",
        'optimizer = "sgd"\n',
        'preset = "cifar"\n',
        "epochs = [\n",
    ],
)
def test_invalid_files(tmp_path, text):
    path = tmp_path / "dtn.toml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_merged_skips_none_and_coerces_ints():
    config = TrainConfig().merged({"lr": 1, "epochs": None})
    assert config.lr == 1.0
    assert isinstance(config.lr, float)
    assert config.epochs == TrainConfig().epochs


def test_booleans_are_not_integers():
    with pytest.raises(ConfigError):
        TrainConfig().merged({"epochs": True})


def test_rng_is_reproducible():
    np.testing.assert_array_equal(make_rng(5).random(4), make_rng(5).random(4))
