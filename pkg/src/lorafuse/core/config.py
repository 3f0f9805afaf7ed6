"""Configuration management for LoraFuse.

Two layers live here:

* ``Config``: application settings (logging, worker count) resolved from
  environment variables, a project file, a global file and defaults.
* ``RunConfig``: the experiment description (model, schedule, sampler, fusion,
  guidance, training, data, evaluation, paths) loaded strictly from YAML.
  Run settings never come from the environment.
"""

import hashlib
import json
import os
import threading
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from dotenv import load_dotenv

from ..utils.validators import (
    ConfigError,
    ValidationError,
    validate_choice,
    validate_even,
    validate_finite_scalar,
    validate_non_negative,
    validate_non_negative_integer,
    validate_positive_integer,
)

ENV_PREFIX = "LORAFUSE_"
_TRUE_VALUES = {"1", "true", "yes", "on"}

POLICY_NAMES = {"base", "content", "style", "merge", "kl", "topk"}
CRITERION_NAMES = {"kl", "js", "cosine", "dot"}
GUIDED_SUFFIX = "+guide"


class Config:
    """Manages application settings from environment variables, config files, and defaults."""

    def __init__(self, config_dir: Optional[Path] = None) -> None:
        """Initialize configuration manager.

        Args:
            config_dir: Optional custom config directory path.
        """
        self.config_dir = config_dir or self._get_default_config_dir()
        self.config_dir.mkdir(parents=True, exist_ok=True)

        load_dotenv()

        self.global_config = self._load_config(self.config_dir / "config.yaml")
        self.project_config = self._load_config(Path.cwd() / ".lorafuse" / "config.yaml")

    @staticmethod
    def _get_default_config_dir() -> Path:
        """Get the default configuration directory based on OS.

        Returns:
            Path to the default config directory.
        """
        home = Path.home()
        if os.name == "nt":
            return home / ".lorafuse"
        return home / ".config" / "lorafuse"

    def _load_config(self, path: Path) -> dict[str, Any]:
        """Load YAML configuration file.

        Args:
            path: Path to config file.

        Returns:
            Configuration dictionary or empty dict if file doesn't exist.
        """
        if not path.exists():
            return {}

        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            warnings.warn(f"Failed to load config from {path}: {e}", stacklevel=2)
            return {}
        return data if isinstance(data, dict) else {}

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value with fallback chain.

        Priority: Environment > Project Config > Global Config > Default

        Args:
            key: Configuration key.
            default: Default value if key not found.

        Returns:
            Configuration value.
        """
        env_value = os.getenv(f"{ENV_PREFIX}{key.upper()}")
        if env_value is not None:
            return env_value

        if key in self.project_config:
            return self.project_config[key]

        if key in self.global_config:
            return self.global_config[key]

        return default

    @property
    def log_level(self) -> str:
        """Logging level (DEBUG, INFO, WARNING, ERROR)."""
        return str(self.get("log_level", "INFO")).upper()

    @property
    def log_to_file(self) -> bool:
        """Whether the daily log file is written."""
        value = self.get("log_to_file", False)
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in _TRUE_VALUES

    @property
    def log_dir(self) -> Path:
        """Directory for log files, created on access."""
        dir_path = Path(self.get("log_dir", str(self.config_dir / "logs")))
        dir_path.mkdir(parents=True, exist_ok=True)
        return dir_path

    @property
    def workers(self) -> int:
        """Default number of evaluation workers.

        Raises:
            ValidationError: If the configured value is not a positive integer.
        """
        value = self.get("workers", 1)
        try:
            value = int(value)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"workers must be an integer, got {value!r}") from e
        return validate_positive_integer(value, "workers")

    def save_config(self, config: dict[str, Any], global_scope: bool = False) -> Path:
        """Save configuration to file.

        Args:
            config: Configuration dictionary to save.
            global_scope: If True, save to global config; otherwise save to project config.

        Returns:
            Path of the written file.
        """
        if global_scope:
            config_path = self.config_dir / "config.yaml"
        else:
            project_dir = Path.cwd() / ".lorafuse"
            project_dir.mkdir(parents=True, exist_ok=True)
            config_path = project_dir / "config.yaml"

        with open(config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config, f, default_flow_style=False)
        return config_path


_config: Optional[Config] = None
_config_lock = threading.Lock()


def get_config() -> Config:
    """Get or create global config instance with thread-safe initialization.

    Uses double-checked locking pattern for thread safety.

    Returns:
        Global Config instance.
    """
    global _config
    if _config is None:
        with _config_lock:
            if _config is None:
                _config = Config()
    return _config


# -- run configuration ---------------------------------------------------------


@dataclass(frozen=True)
class ModelSection:
    input_dim: int = 256
    hidden_width: int = 256
    hidden_layers: int = 3
    time_embed_dim: int = 16
    rank: int = 4
    alpha: Optional[float] = None
    adapted_layers: Optional[list[int]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        validate_positive_integer(self.input_dim, "model.input_dim")
        validate_positive_integer(self.hidden_width, "model.hidden_width")
        validate_non_negative_integer(self.hidden_layers, "model.hidden_layers")
        validate_positive_integer(self.time_embed_dim, "model.time_embed_dim")
        validate_even(self.time_embed_dim, "model.time_embed_dim")
        validate_positive_integer(self.rank, "model.rank")
        validate_non_negative_integer(self.seed, "model.seed")
        if self.alpha is not None and validate_finite_scalar(self.alpha, "model.alpha") <= 0:
            raise ConfigError(f"model.alpha must be positive, got {self.alpha}")
        if self.adapted_layers is not None:
            for index in self.adapted_layers:
                validate_non_negative_integer(index, "model.adapted_layers")
                if index > self.hidden_layers:
                    raise ConfigError(
                        f"model.adapted_layers: layer {index} does not exist "
                        f"({self.hidden_layers + 1} layers)"
                    )

    @property
    def adapted_tuple(self) -> Optional[tuple[int, ...]]:
        return None if self.adapted_layers is None else tuple(self.adapted_layers)


@dataclass(frozen=True)
class ScheduleSection:
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        validate_positive_integer(self.train_steps, "schedule.train_steps")
        start = validate_finite_scalar(self.beta_start, "schedule.beta_start")
        end = validate_finite_scalar(self.beta_end, "schedule.beta_end")
        if not 0.0 < start < end < 1.0:
            raise ConfigError(f"schedule needs 0 < beta_start < beta_end < 1, got {start}, {end}")


@dataclass(frozen=True)
class SamplerSection:
    num_steps: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        validate_positive_integer(self.num_steps, "sampler.num_steps")
        validate_non_negative_integer(self.seed, "sampler.seed")


@dataclass(frozen=True)
class FusionSection:
    policy: str = "kl"
    criterion: str = "kl"
    temperature: float = 1.0
    k: Optional[int] = None
    lambda_content: float = 1.0
    lambda_style: float = 1.0

    def __post_init__(self) -> None:
        validate_choice(self.policy, POLICY_NAMES, "fusion.policy")
        validate_choice(self.criterion, CRITERION_NAMES, "fusion.criterion")
        if validate_finite_scalar(self.temperature, "fusion.temperature") <= 0:
            raise ConfigError(f"fusion.temperature must be positive, got {self.temperature}")
        if self.k is not None:
            validate_positive_integer(self.k, "fusion.k")
        validate_finite_scalar(self.lambda_content, "fusion.lambda_content")
        validate_finite_scalar(self.lambda_style, "fusion.lambda_style")


@dataclass(frozen=True)
class GuidanceSection:
    enabled: bool = True
    m: float = 10.0
    stride: int = 1
    embed_dim: int = 32
    encoder_seed: int = 1234
    reference_seed: Optional[int] = None

    def __post_init__(self) -> None:
        validate_non_negative(validate_finite_scalar(self.m, "guidance.m"), "guidance.m")
        validate_positive_integer(self.stride, "guidance.stride")
        validate_positive_integer(self.embed_dim, "guidance.embed_dim")
        validate_non_negative_integer(self.encoder_seed, "guidance.encoder_seed")
        if self.reference_seed is not None:
            validate_non_negative_integer(self.reference_seed, "guidance.reference_seed")


@dataclass(frozen=True)
class TrainingSection:
    base_steps: int = 2000
    adapter_steps: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        validate_non_negative_integer(self.base_steps, "training.base_steps")
        validate_non_negative_integer(self.adapter_steps, "training.adapter_steps")
        if validate_finite_scalar(self.learning_rate, "training.learning_rate") <= 0:
            raise ConfigError(f"training.learning_rate must be positive, got {self.learning_rate}")
        validate_positive_integer(self.batch_size, "training.batch_size")
        validate_non_negative_integer(self.seed, "training.seed")
        validate_positive_integer(self.log_every, "training.log_every")


@dataclass(frozen=True)
class DataSection:
    image_side: int = 16
    noise: float = 0.05
    seed: int = 0
    n_per_cell: int = 32

    def __post_init__(self) -> None:
        validate_positive_integer(self.image_side, "data.image_side")
        validate_non_negative(validate_finite_scalar(self.noise, "data.noise"), "data.noise")
        validate_non_negative_integer(self.seed, "data.seed")
        validate_positive_integer(self.n_per_cell, "data.n_per_cell")


@dataclass(frozen=True)
class EvaluationSection:
    seeds: int = 20
    policies: list[str] = field(
        default_factory=lambda: ["base", "content", "style", "merge", "topk", "kl", "kl+guide"]
    )
    criteria: list[str] = field(default_factory=lambda: ["kl", "js", "cosine", "dot"])
    m_values: list[float] = field(default_factory=lambda: [0.0, 1.0, 5.0, 10.0, 20.0])

    def __post_init__(self) -> None:
        validate_positive_integer(self.seeds, "evaluation.seeds")
        if not self.policies:
            raise ConfigError("evaluation.policies must not be empty")
        for name in self.policies:
            base = name[: -len(GUIDED_SUFFIX)] if name.endswith(GUIDED_SUFFIX) else name
            validate_choice(base, POLICY_NAMES, "evaluation.policies")
        for name in self.criteria:
            validate_choice(name, CRITERION_NAMES, "evaluation.criteria")
        for m in self.m_values:
            validate_non_negative(validate_finite_scalar(m, "evaluation.m_values"), "evaluation.m_values")


@dataclass(frozen=True)
class PathsSection:
    base: str = "weights/base.lfw"
    content: str = "weights/content.lfw"
    style: str = "weights/style.lfw"
    out_dir: str = "runs"


_SECTIONS: dict[str, type] = {
    "model": ModelSection,
    "schedule": ScheduleSection,
    "sampler": SamplerSection,
    "fusion": FusionSection,
    "guidance": GuidanceSection,
    "training": TrainingSection,
    "data": DataSection,
    "evaluation": EvaluationSection,
    "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved experiment configuration."""

    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self) -> None:
        side = self.data.image_side
        if side * side != self.model.input_dim:
            raise ConfigError(
                f"model.input_dim ({self.model.input_dim}) must equal data.image_side squared ({side * side})"
            )
        if side % 4 != 0:
            raise ConfigError(f"data.image_side must be a multiple of 4, got {side}")
        if self.sampler.num_steps > self.schedule.train_steps:
            raise ConfigError(
                f"sampler.num_steps ({self.sampler.num_steps}) exceeds schedule.train_steps "
                f"({self.schedule.train_steps})"
            )

    @classmethod
    def from_dict(cls, data: Optional[dict[str, Any]]) -> "RunConfig":
        """Build a configuration from a nested mapping.

        Raises:
            ConfigError: Naming the dotted key that is unknown or invalid.
        """
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("run configuration must be a mapping of sections")

        sections = {}
        for name, values in data.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown configuration section '{name}'")
            section_type = _SECTIONS[name]
            values = values or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            known = {f.name for f in fields(section_type)}
            for key in values:
                if key not in known:
                    raise ConfigError(f"unknown configuration key '{name}.{key}'")
            try:
                sections[name] = section_type(**values)
            except ConfigError:
                raise
            except (ValidationError, TypeError) as e:
                raise ConfigError(f"invalid value in section '{name}': {e}") from e
        return cls(**sections)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """Load a YAML run configuration.

        Raises:
            ConfigError: If the file is not valid YAML or has unknown/invalid keys.
        """
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=True)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON rendering of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def write_resolved(self, path: Union[str, Path]) -> Path:
        """Write the resolved configuration as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path

    def with_section(self, name: str, **changes: Any) -> "RunConfig":
        """Copy with some keys of one section replaced.

        Raises:
            ConfigError: If the section or a key is unknown.
        """
        if name not in _SECTIONS:
            raise ConfigError(f"unknown configuration section '{name}'")
        section = getattr(self, name)
        known = {f.name for f in fields(section)}
        for key in changes:
            if key not in known:
                raise ConfigError(f"unknown configuration key '{name}.{key}'")
        return replace(self, **{name: replace(section, **changes)})


DEFAULT_RUN_CONFIG = """\
# LoraFuse run configuration.
# Every command reads this file; nothing here is taken from the environment.

model:
  input_dim: 256          # image_side squared
  hidden_width: 256
  hidden_layers: 3
  time_embed_dim: 16
  rank: 4
  alpha: null             # null means alpha = rank
  adapted_layers: null    # null adapts every affine layer
  seed: 0

schedule:
  train_steps: 1000
  beta_start: 0.0001
  beta_end: 0.02

sampler:
  num_steps: 50
  seed: 0

fusion:
  policy: kl              # base | content | style | merge | kl | topk
  criterion: kl           # kl | js | cosine | dot
  temperature: 1.0
  k: null                 # topk only; null means 1% of the layer, at least 8
  lambda_content: 1.0
  lambda_style: 1.0

guidance:
  enabled: true
  m: 10.0
  stride: 1
  embed_dim: 32
  encoder_seed: 1234
  reference_seed: null    # null reuses the sampling seed

training:
  base_steps: 2000
  adapter_steps: 1000
  learning_rate: 0.001
  batch_size: 16
  seed: 0
  log_every: 100

data:
  image_side: 16
  noise: 0.05
  seed: 0
  n_per_cell: 32

evaluation:
  seeds: 20
  policies: [base, content, style, merge, topk, kl, kl+guide]
  criteria: [kl, js, cosine, dot]
  m_values: [0.0, 1.0, 5.0, 10.0, 20.0]

paths:
  base: weights/base.lfw
  content: weights/content.lfw
  style: weights/style.lfw
  out_dir: runs
"""
