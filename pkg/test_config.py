"""Tests for run configuration resolution."""
import os
from pathlib import Path

import pytest

from config import (
    ENV_PREFIX,
    get_env,
    read_config_file,
    resolve_run_config,
    with_model_toggles,
    write_resolved_config,
)
from errors import ConfigurationError


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in list(os.environ):
        if name.startswith(ENV_PREFIX):
            monkeypatch.delenv(name)


def write_config(path: Path, *lines: str) -> Path:
    path.write_text("\n".join(lines) + "\n")
    return path


class TestResolve:

    def test_defaults(self):
        run_config = resolve_run_config()
        assert run_config.seed == 0
        assert run_config.run.threshold == 0.20
        assert run_config.model.precision == run_config.train.precision == "f32"
        assert len(run_config.sweep_grid) == 21

    def test_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MER_SEED", "5")
        monkeypatch.setenv("MER_BATCH_SIZE", "8")
        path = write_config(tmp_path / "run.env", "SEED=6", "EPOCHS_MAX=4")
        assert resolve_run_config().seed == 5
        from_file = resolve_run_config(path)
        assert from_file.seed == 6
        assert from_file.train.batch_size == 8
        assert from_file.train.epochs_max == 4
        overridden = resolve_run_config(path, {"SEED": 7, "EPOCHS_MAX": None})
        assert overridden.seed == 7
        assert overridden.train.epochs_max == 4

    def test_seed_and_precision_reach_every_stage(self, tmp_path):
        run_config = resolve_run_config(write_config(tmp_path / "run.env", "SEED=3", "PRECISION=f64"))
        assert run_config.train.seed == 3
        assert run_config.model.precision == "f64"

    def test_booleans(self, tmp_path):
        run_config = resolve_run_config(write_config(tmp_path / "run.env", "FUSION_ATTENTION=no", "SE_BLOCK=1"))
        assert not run_config.model.fusion_attention
        assert run_config.model.se_block

    def test_sweep_grid(self, tmp_path):
        run_config = resolve_run_config(write_config(
            tmp_path / "run.env", "SWEEP_START=0.2", "SWEEP_STOP=0.4", "SWEEP_POINTS=3"))
        assert list(run_config.sweep_grid) == [0.2, 0.3, 0.4]

    @pytest.mark.parametrize("line", [
        "SEED=abc",
        "FUSION_ATTENTION=maybe",
        "INPUT_SIDE=30",
        "SPLIT_PROTOCOL=shuffled",
        "SWEEP_START=0.5",
        "PRECISION=f16",
        "POLY_N=4",
        "SYNTH_PEAK_MIN=0.1",
    ])
    def test_invalid_values(self, tmp_path, line):
        with pytest.raises(ConfigurationError):
            resolve_run_config(write_config(tmp_path / "run.env", line))

    def test_unknown_setting(self, tmp_path):
        with pytest.raises(ConfigurationError, match="COLOUR"):
            read_config_file(write_config(tmp_path / "run.env", "COLOUR=blue"))
        with pytest.raises(ConfigurationError):
            resolve_run_config(overrides={"COLOUR": "blue"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            resolve_run_config(tmp_path / "absent.env")

    def test_resolved_file_reproduces_config(self, tmp_path):
        original = resolve_run_config(write_config(tmp_path / "run.env", "SEED=9", "LEARNING_RATE=0.003",
                                                   "OUT_DIR=out/here", "SE_BLOCK=false"))
        write_resolved_config(original, tmp_path / "resolved" / "resolved_config.env")
        assert resolve_run_config(tmp_path / "resolved" / "resolved_config.env") == original

    def test_model_toggles(self):
        run_config = resolve_run_config()
        toggled = with_model_toggles(run_config, fusion_attention=False, se_block=True, seed=2)
        assert not toggled.model.fusion_attention
        assert toggled.train.seed == 2
        assert run_config.model.fusion_attention


class TestGetEnv:

    def test_prefixed_lookup(self, monkeypatch):
        monkeypatch.setenv("MER_LOG_LEVEL", "DEBUG")
        assert get_env("LOG_LEVEL") == "DEBUG"
        assert get_env("NOT_SET", "fallback") == "fallback"

    def test_missing_required(self):
        with pytest.raises(ConfigurationError):
            get_env("NOT_SET")
