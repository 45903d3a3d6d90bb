"""Configuration settings for micro-expression recognition runs.

Settings resolve from built-in defaults, then `MER_*` environment variables
(a `.env` file next to this module is loaded first), then a dotenv-format
run configuration file, then command-line flags.
"""
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv

from errors import ConfigurationError
from microattnet import DEFAULT_THRESHOLD, ModelConfig
from optflow import FarnebackParams
from synthetic import SynthConfig
from training import TrainConfig

# Load environment variables from .env file in root directory
env_path = Path(__file__).parent / ".env"
load_dotenv(env_path)

ENV_PREFIX = "MER_"


def get_env(name: str, default: Optional[str] = None) -> str:
    """Get a MER_-prefixed environment variable with optional default."""
    value = os.getenv(ENV_PREFIX + name, default)
    if value is None:
        raise ConfigurationError(f"Missing required environment variable: {ENV_PREFIX}{name}")
    return value


LOG_LEVEL = get_env("LOG_LEVEL", "INFO")
LOG_FILE_NAME = "stage.log"
STAGES_FILE_NAME = "stages.csv"
RESOLVED_CONFIG_NAME = "resolved_config.env"


@dataclass
class RunSettings:
    seed: int = 0
    out_dir: Path = Path("runs/latest")
    threshold: float = DEFAULT_THRESHOLD
    border_exclusion: int = 2
    workers: int = 1
    split_protocol: str = "subject"
    sweep_start: float = 0.10
    sweep_stop: float = 0.30
    sweep_points: int = 21
    ablation_seeds: int = 3


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    farneback: FarnebackParams = field(default_factory=FarnebackParams)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out_dir(self) -> Path:
        return self.run.out_dir

    @property
    def sweep_grid(self) -> np.ndarray:
        return np.round(np.linspace(self.run.sweep_start, self.run.sweep_stop, self.run.sweep_points), 4)

    def to_env_lines(self, sections: Optional[tuple[str, ...]] = None) -> list[str]:
        """Render settings as KEY=value lines, optionally limited to some sections."""
        lines = []
        for key, (section, attr, _) in SETTINGS.items():
            if sections is not None and section not in sections:
                continue
            lines.append(f"{key}={_format(getattr(getattr(self, section), attr))}")
        return lines


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# KEY -> (section, attribute, parser)
SETTINGS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "SEED": ("run", "seed", int),
    "OUT_DIR": ("run", "out_dir", Path),
    "THRESHOLD": ("run", "threshold", float),
    "BORDER_EXCLUSION": ("run", "border_exclusion", int),
    "WORKERS": ("run", "workers", int),
    "SPLIT_PROTOCOL": ("run", "split_protocol", str),
    "SWEEP_START": ("run", "sweep_start", float),
    "SWEEP_STOP": ("run", "sweep_stop", float),
    "SWEEP_POINTS": ("run", "sweep_points", int),
    "ABLATION_SEEDS": ("run", "ablation_seeds", int),
    "INPUT_SIDE": ("model", "input_side", int),
    "C1": ("model", "c1", int),
    "C2": ("model", "c2", int),
    "SE_REDUCTION": ("model", "se_reduction", int),
    "HEAD_HIDDEN": ("model", "head_hidden", int),
    "DROPOUT_CONV": ("model", "dropout_conv", float),
    "DROPOUT_HEAD": ("model", "dropout_head", float),
    "FUSION_ATTENTION": ("model", "fusion_attention", _parse_bool),
    "SE_BLOCK": ("model", "se_block", _parse_bool),
    "PRECISION": ("train", "precision", str),
    "LEARNING_RATE": ("train", "lr", float),
    "EPOCHS_MAX": ("train", "epochs_max", int),
    "BATCH_SIZE": ("train", "batch_size", int),
    "GAMMA_FOCAL": ("train", "gamma_focal", float),
    "PATIENCE": ("train", "patience", int),
    "MIN_DELTA": ("train", "min_delta", float),
    "LOSS": ("train", "loss", str),
    "PHASE_POLICY": ("train", "phase_policy", str),
    "PYRAMID_SCALE": ("farneback", "pyramid_scale", float),
    "LEVELS": ("farneback", "levels", int),
    "WINDOW_SIZE": ("farneback", "window_size", int),
    "ITERATIONS": ("farneback", "iterations", int),
    "POLY_N": ("farneback", "poly_n", int),
    "POLY_SIGMA": ("farneback", "poly_sigma", float),
    "SYNTH_PER_CLASS": ("synth", "per_class", int),
    "SYNTH_FRAMES_MIN": ("synth", "frames_min", int),
    "SYNTH_FRAMES_MAX": ("synth", "frames_max", int),
    "SYNTH_SIDE": ("synth", "side", int),
    "SYNTH_PEAK_MIN": ("synth", "peak_min", float),
    "SYNTH_PEAK_MAX": ("synth", "peak_max", float),
    "SYNTH_WIDTH_MIN": ("synth", "width_min", float),
    "SYNTH_WIDTH_MAX": ("synth", "width_max", float),
    "SYNTH_MULTI_LABEL_FRACTION": ("synth", "multi_label_fraction", float),
    "SYNTH_SUBJECTS": ("synth", "subjects", int),
    "SYNTH_NOISE_SIGMA": ("synth", "noise_sigma", float),
    "VAL_FRACTION": ("synth", "val_fraction", float),
    "TEST_FRACTION": ("synth", "test_fraction", float),
}


def _environment_settings() -> dict[str, str]:
    values = {}
    for name, value in os.environ.items():
        if name.startswith(ENV_PREFIX) and name[len(ENV_PREFIX):] in SETTINGS:
            values[name[len(ENV_PREFIX):]] = value
    return values


def read_config_file(path: Union[str, Path]) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    unknown = sorted(set(values) - set(SETTINGS))
    if unknown:
        raise ConfigurationError(f"Unknown setting '{unknown[0]}' in {path}")
    return values


def resolve_run_config(config_path: Optional[Union[str, Path]] = None,
                       overrides: Optional[dict[str, object]] = None) -> RunConfig:
    """Merge defaults, environment, config file and overrides into a RunConfig.

    Args:
        config_path: Optional dotenv-format file with unprefixed setting names.
        overrides: Setting values from command-line flags, keyed like the file.

    Returns:
        The validated configuration.
    """
    raw: dict[str, object] = dict(_environment_settings())
    if config_path is not None:
        raw.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        if key not in SETTINGS:
            raise ConfigurationError(f"Unknown setting '{key}'")
        if value is not None:
            raw[key] = value

    sections: dict[str, dict[str, object]] = {name: {} for name in ("run", "model", "train", "farneback", "synth")}
    for key, value in raw.items():
        section, attr, parser = SETTINGS[key]
        try:
            sections[section][attr] = value if not isinstance(value, str) else parser(value)
        except ValueError as e:
            raise ConfigurationError(f"Invalid value for {key}: {e}")

    # One seed and one precision drive every stage.
    precision = sections["train"].get("precision", TrainConfig().precision)
    sections["model"]["precision"] = precision
    sections["train"]["seed"] = sections["run"].get("seed", RunSettings().seed)

    run = RunSettings(**sections["run"])
    if run.split_protocol not in ("subject", "random"):
        raise ConfigurationError(f"Unknown split protocol '{run.split_protocol}'")
    if run.sweep_points < 1 or not 0 < run.sweep_start <= run.sweep_stop < 1:
        raise ConfigurationError("sweep range must satisfy 0 < start <= stop < 1 with at least one point")
    if run.workers < 1 or run.ablation_seeds < 1:
        raise ConfigurationError("workers and ablation seeds must be >= 1")
    try:
        return RunConfig(
            run=run,
            model=ModelConfig(**sections["model"]),
            train=TrainConfig(**sections["train"]),
            farneback=FarnebackParams(**sections["farneback"]),
            synth=SynthConfig(**sections["synth"]),
        )
    except TypeError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")


def write_resolved_config(run_config: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(run_config.to_env_lines()) + "\n", encoding="utf-8")


def with_model_toggles(run_config: RunConfig, fusion_attention: bool, se_block: bool, seed: int) -> RunConfig:
    """Copy of run_config with ablation toggles and a training seed applied."""
    return replace(
        run_config,
        model=replace(run_config.model, fusion_attention=fusion_attention, se_block=se_block),
        train=replace(run_config.train, seed=seed),
    )
