"""
Tests for YAML configuration, overrides and environment settings.
"""
from pathlib import Path

import pytest

from src.ccl_rec.config import (
    DistanceKind,
    Objective,
    RunConfig,
    Strategy,
    deep_merge,
    describe_fields,
    load_config,
    overrides_to_dict,
    resolve_override,
    save_config,
)
from src.ccl_rec.errors import ConfigError

PROJECT_CONFIG = Path(__file__).parent.parent / "config.yaml"

SYNTHETIC_YAML = """
synthetic:
  n_users: 30
  n_items: 60
  dim: 4
  latent_dim: 2
  exposures_per_user: 10
train:
  epochs: 2
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(SYNTHETIC_YAML)
    return path


class TestLoadConfig:
    def test_project_default(self):
        config = load_config(PROJECT_CONFIG)
        assert config.train.strategy is Strategy.EASY2HARD
        assert config.train.batch_size == 32
        assert config.margin.distance is DistanceKind.COSINE
        assert config.synthetic is not None

    def test_file_then_defaults(self, config_file):
        config = load_config(config_file)
        assert config.synthetic.n_users == 30
        assert config.train.epochs == 2
        assert config.train.n_p == 3
        assert config.train.objectives == list(Objective)

    def test_overrides_win(self, config_file):
        config = load_config(config_file, {"strategy": "harder", "margin.delta_u": "2.0", "n_r": "2"})
        assert config.train.strategy is Strategy.HARDER
        assert config.margin.delta_u == 2.0
        assert config.train.n_r == 2

    def test_list_override(self, config_file):
        config = load_config(config_file, {"objectives": "[l_ce, l_cui]"})
        assert config.train.objectives == [Objective.CE, Objective.CUI]

    def test_bad_enum_lists_choices(self, config_file):
        with pytest.raises(ConfigError) as exc:
            load_config(config_file, {"strategy": "bogus"})
        message = str(exc.value)
        assert "train.strategy" in message
        for strategy in Strategy:
            assert strategy.value in message

    def test_unknown_yaml_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(SYNTHETIC_YAML + "  warmup: 3\n")
        with pytest.raises(ConfigError, match="warmup"):
            load_config(path)

    def test_data_source_required(self):
        with pytest.raises(ConfigError):
            load_config(None)

    def test_synthetic_and_paths_conflict(self, config_file):
        with pytest.raises(ConfigError):
            load_config(config_file, {"data.interactions": "log.tsv", "data.features": "f.cclf"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_save_and_reload(self, config_file, tmp_path):
        config = load_config(config_file, {"strategy": "hard2easy", "dir": str(tmp_path / "out")})
        saved = tmp_path / "saved" / "config.yaml"
        save_config(config, saved)
        assert load_config(saved) == config


class TestOverrides:
    def test_bare_and_qualified(self):
        assert resolve_override("n_p") == ("train", "n_p")
        assert resolve_override("margin.delta_l") == ("margin", "delta_l")
        assert resolve_override("log-level") == ("output", "log_level")

    def test_seed_defaults_to_training(self):
        assert resolve_override("seed") == ("train", "seed")
        assert resolve_override("synthetic.seed") == ("synthetic", "seed")

    @pytest.mark.parametrize("key", ["warmup", "train.warmup", "nosection.n_p"])
    def test_unknown(self, key):
        with pytest.raises(ConfigError):
            resolve_override(key)

    def test_values_parsed_as_yaml(self):
        nested = overrides_to_dict({"adaptive": "false", "n_r": "null", "lr": "0.01"})
        assert nested == {"margin": {"adaptive": False}, "train": {"n_r": None, "lr": 0.01}}

    def test_deep_merge(self):
        base = {"train": {"lr": 0.1, "epochs": 3}, "output": {"dir": "a"}}
        merged = deep_merge(base, {"train": {"lr": 0.2}})
        assert merged == {"train": {"lr": 0.2, "epochs": 3}, "output": {"dir": "a"}}
        assert base["train"]["lr"] == 0.1


class TestEnvironment:
    @pytest.fixture
    def clean_env(self, monkeypatch):
        for name in ("CCL_REC_LOG_LEVEL", "CCL_REC_OUTPUT_DIR"):
            monkeypatch.setenv(name, "unset")
            monkeypatch.delenv(name)

    def test_variables(self, config_file, monkeypatch, clean_env):
        monkeypatch.setenv("CCL_REC_LOG_LEVEL", "DEBUG")
        assert load_config(config_file).output.log_level == "DEBUG"

    def test_command_line_beats_environment(self, config_file, monkeypatch, clean_env):
        monkeypatch.setenv("CCL_REC_LOG_LEVEL", "DEBUG")
        assert load_config(config_file, {"log_level": "WARNING"}).output.log_level == "WARNING"

    def test_env_file(self, config_file, tmp_path, clean_env):
        env_file = tmp_path / "settings.env"
        env_file.write_text(f"CCL_REC_OUTPUT_DIR={tmp_path / 'from_env'}\n")
        config = load_config(config_file, env_file=env_file)
        assert config.output.dir == tmp_path / "from_env"


def test_describe_fields_lists_defaults():
    lines = describe_fields()
    assert any("--train.strategy (default: easy2hard)" in line for line in lines)
    assert any(line.strip().startswith("--margin.delta_u (default: 1.5)") for line in lines)


def test_run_config_rejects_unknown_section():
    with pytest.raises(ValueError):
        RunConfig(synthetic={}, extras={"a": 1})
