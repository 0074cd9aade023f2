"""Configuration management for ccl_rec."""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


logger = logging.getLogger(__name__)

REFERENCE = "(reference setting)"


class Strategy(str, Enum):
    """Controllable augmentation strategies."""
    RANDOM = "random"
    HARDER = "harder"
    EASIER = "easier"
    EASY2HARD = "easy2hard"
    HARD2EASY = "hard2easy"


class Objective(str, Enum):
    """The seven loss terms of the total objective."""
    CCL = "l_ccl"
    CCL_POS = "l_ccl_pos"
    CCL_NEG = "l_ccl_neg"
    CE = "l_ce"
    CE_POS = "l_ce_pos"
    CE_NEG = "l_ce_neg"
    CUI = "l_cui"


class DistanceKind(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


class Section(BaseModel):
    """Base for config sections: unknown keys are errors."""
    model_config = ConfigDict(extra="forbid")


class DataConfig(Section):
    """Dataset paths and instance construction."""
    interactions: Optional[Path] = Field(None, description="tab-separated interaction log")
    features: Optional[Path] = Field(None, description="item feature table (.cclf binary or .csv)")
    n_max: int = Field(50, ge=1, description="most recent clicks kept per history")
    holdout: int = Field(1, ge=1, description="latest exposures per user held out for evaluation")


class SyntheticSpec(Section):
    """Latent-factor click generator used for desk-scale verification."""
    n_users: int = Field(200, ge=1, description="number of users")
    n_items: int = Field(500, ge=2, description="gallery size")
    dim: int = Field(16, ge=2, description="item feature dimension")
    latent_dim: int = Field(8, ge=1, description="latent factor dimension")
    click_noise_rate: float = Field(0.1, ge=0.0, le=0.5, description="probability a label is flipped")
    exposures_per_user: int = Field(100, ge=1, description="logged exposures per user")
    signal_scale: float = Field(8.0, gt=0.0, description="multiplier on the latent click logit")
    feature_noise: float = Field(0.05, ge=0.0, description="std of additive feature noise")
    seed: int = Field(7, ge=0, description="generator seed")

    @model_validator(mode="after")
    def check_dims(self) -> "SyntheticSpec":
        if self.latent_dim > self.dim:
            raise ValueError(f"latent_dim ({self.latent_dim}) cannot exceed dim ({self.dim})")
        if self.dim % 2:
            raise ValueError(f"dim must be even, got {self.dim}")
        if self.exposures_per_user > self.n_items:
            raise ValueError("exposures_per_user cannot exceed n_items")
        return self


class MarginConfig(Section):
    """Hinge margins and the representation distance."""
    delta_s: float = Field(1.0, gt=0.0, description="margin scale")
    delta_u: float = Field(1.5, gt=0.0, description=f"margin upper bound {REFERENCE}")
    delta_l: float = Field(0.5, gt=0.0, description=f"margin lower bound {REFERENCE}")
    adaptive: bool = Field(True, description="hardness-scaled margins; false uses the fixed delta")
    delta: float = Field(1.0, gt=0.0, description="fixed margin when adaptive is false")
    distance: DistanceKind = Field(DistanceKind.COSINE, description="cosine or euclidean")

    @model_validator(mode="after")
    def check_bounds(self) -> "MarginConfig":
        if self.delta_l > self.delta_u:
            raise ValueError(f"delta_l ({self.delta_l}) must not exceed delta_u ({self.delta_u})")
        return self


class TrainConfig(Section):
    """Optimizer, batching and augmentation settings."""
    batch_size: int = Field(32, ge=1, description=f"instances per optimizer step {REFERENCE}")
    epochs: int = Field(10, ge=0, description="passes over the training instances")
    lr: float = Field(0.003, ge=0.0, description=f"Adam learning rate {REFERENCE}")
    beta1: float = Field(0.9, ge=0.0, lt=1.0, description="Adam first-moment decay")
    beta2: float = Field(0.999, ge=0.0, lt=1.0, description="Adam second-moment decay")
    eps: float = Field(1e-8, gt=0.0, description="Adam denominator epsilon")
    weight_decay: float = Field(1e-7, ge=0.0, description=f"decoupled weight decay {REFERENCE}")
    n_p: int = Field(3, ge=1, description=f"augmented positives per instance {REFERENCE}")
    n_n: int = Field(3, ge=1, description=f"augmented negatives per instance {REFERENCE}")
    n_z: int = Field(256, ge=1, description="substitute pool size shared by a batch")
    n_r: Optional[int] = Field(None, ge=1, description="fixed replacements per sample (null: halving rule)")
    strategy: Strategy = Field(Strategy.EASY2HARD, description="augmentation sampling strategy")
    seed: int = Field(2023, ge=0, description="root seed for every random stream")
    objectives: List[Objective] = Field(default_factory=lambda: list(Objective), description="enabled loss terms")
    show_progress: bool = Field(False, description="batch progress bar on stderr")


class EvaluationConfig(Section):
    k: int = Field(50, ge=1, description=f"ranking cutoff for P/R/F1 {REFERENCE}")


class OutputConfig(Section):
    dir: Path = Field(Path("runs/default"), description="directory for logs and checkpoints")
    log_level: str = Field("INFO", description="logging level")


class RunConfig(Section):
    """Full run configuration."""
    data: DataConfig = DataConfig()
    synthetic: Optional[SyntheticSpec] = None
    train: TrainConfig = TrainConfig()
    margin: MarginConfig = MarginConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def exactly_one_source(self) -> "RunConfig":
        has_paths = self.data.interactions is not None or self.data.features is not None
        if self.synthetic is not None and has_paths:
            raise ValueError("give either a synthetic section or dataset paths, not both")
        if self.synthetic is None:
            if self.data.interactions is None or self.data.features is None:
                raise ValueError("dataset mode needs both data.interactions and data.features")
        return self


SECTIONS: Dict[str, type] = {
    "data": DataConfig,
    "synthetic": SyntheticSpec,
    "train": TrainConfig,
    "margin": MarginConfig,
    "evaluation": EvaluationConfig,
    "output": OutputConfig,
}


# Bare keys present in several sections.
PREFERRED_SECTION = {"seed": "train"}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """
    Deep merge two dictionaries.

    Override values take precedence over base values.
    Nested dictionaries are merged recursively.
    """
    result = base.copy()

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value

    return result


def resolve_override(key: str) -> tuple:
    """
    Map a command-line key to (section, field).

    Accepts ``section.field`` or a bare field name that exists in exactly one
    section. Dashes are read as underscores.
    """
    key = key.replace("-", "_")
    if "." in key:
        section, name = key.split(".", 1)
        model = SECTIONS.get(section)
        if model is None or name not in model.model_fields:
            raise ConfigError(f"unknown config key: {key}")
        return section, name

    if key in PREFERRED_SECTION:
        return PREFERRED_SECTION[key], key
    owners = [section for section, model in SECTIONS.items() if key in model.model_fields]
    if not owners:
        raise ConfigError(f"unknown config key: {key}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous config key {key}: qualify it as one of " + ", ".join(f"{o}.{key}" for o in owners))
    return owners[0], key


def overrides_to_dict(pairs: Dict[str, str]) -> Dict[str, Any]:
    """Turn ``{"strategy": "harder"}`` into ``{"train": {"strategy": "harder"}}``."""
    nested: Dict[str, Any] = {}
    for key, raw in pairs.items():
        section, name = resolve_override(key)
        nested.setdefault(section, {})[name] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return nested


def load_yaml_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return loaded


def environment_overrides(env_file: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Read output settings from the environment (and an optional .env file).

    CCL_REC_LOG_LEVEL and CCL_REC_OUTPUT_DIR map to output.log_level and output.dir.
    """
    if env_file is not None and Path(env_file).exists():
        load_dotenv(env_file)
    else:
        load_dotenv()

    output: Dict[str, Any] = {}
    if os.getenv("CCL_REC_LOG_LEVEL"):
        output["log_level"] = os.getenv("CCL_REC_LOG_LEVEL")
    if os.getenv("CCL_REC_OUTPUT_DIR"):
        output["dir"] = os.getenv("CCL_REC_OUTPUT_DIR")
    return {"output": output} if output else {}


def build_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a merged dictionary, turning pydantic errors into ConfigError."""
    try:
        return RunConfig(**raw)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            where = ".".join(str(part) for part in err["loc"]) or "config"
            problems.append(f"{where}: {err['msg']}")
        raise ConfigError("invalid configuration: " + "; ".join(problems)) from e
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
    env_file: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """
    Load a run configuration.

    Hierarchy (later overrides earlier):
    1. Model defaults
    2. The YAML file at ``path``
    3. Environment / .env output settings
    4. Command-line overrides

    Returns:
        Validated RunConfig
    """
    merged: Dict[str, Any] = {}
    if path is not None:
        merged = deep_merge(merged, load_yaml_file(path))
    merged = deep_merge(merged, environment_overrides(env_file))
    if overrides:
        merged = deep_merge(merged, overrides_to_dict(overrides))

    config = build_config(merged)
    logger.debug(f"Loaded configuration from {path}: {config.model_dump(mode='json')}")
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    """
    Save a resolved configuration next to run outputs.

    Args:
        config: RunConfig to save
        path: destination YAML file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    config_dict = config.model_dump(mode="json", exclude_none=True)

    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(config_dict, f, default_flow_style=False, sort_keys=False)


def describe_fields() -> List[str]:
    """One line per config key with its default, for --help."""
    lines = []
    for section, model in SECTIONS.items():
        for name, info in model.model_fields.items():
            default = info.get_default(call_default_factory=True)
            if isinstance(default, Enum):
                default = default.value
            elif isinstance(default, list):
                default = ",".join(getattr(d, "value", str(d)) for d in default)
            lines.append(f"  --{section}.{name} (default: {default})  {info.description or ''}")
    return lines
