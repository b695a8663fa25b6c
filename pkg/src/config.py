"""Configuration management for the VLCD desk engine."""

import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

PROJECT_ROOT = Path(__file__).parent.parent


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="VLCD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application
    log_level: str = "INFO"

    # Experiments
    default_config: str = str(PROJECT_ROOT / "configs" / "desk_default.json")
    runs_dir: str = "runs"
    jobs: int = 1

    # Artifact registry (sqlite file inside every experiment directory)
    registry_name: str = "registry.sqlite"

    def registry_url(self, experiment_dir: Path) -> str:
        """SQLAlchemy URL of the registry database for an experiment directory."""
        return f"sqlite+aiosqlite:///{Path(experiment_dir) / self.registry_name}"


# Downstream binary tasks of the synthetic world, with the clinical label each one stands in for
TASKS = {
    "task-0": {"analog": "meconium"},
    "task-1": {"analog": "fetal inflammatory response"},
    "task-2": {"analog": "maternal inflammatory response"},
    "task-3": {"analog": "chorioamnionitis"},
    "task-4": {"analog": "neonatal sepsis"},
}
TASK_NAMES = list(TASKS)

# The degraded-capture set is only labeled for these task indices
DEGRADED_TASKS: Tuple[int, ...] = (2, 3)

# Target positive rates used when calibrating task thresholds
TASK_POSITIVE_RATES: Tuple[float, ...] = (0.35, 0.45, 0.5, 0.4, 0.3)

DATASET_KINDS = ("pretrain", "unlabeled", "finetune", "degraded")

STAGES = ("teacher", "predistill", "vlcd", "kd-baseline", "no-kd", "nd-class")

ABLATION_LAMBDAS: Tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)


class ConfigError(Exception):
    """Raised for malformed or inconsistent experiment configuration."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.message = message
        self.field = field
        super().__init__(message)


class _Section(BaseModel):
    """Base for config sections: immutable, unknown keys rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class WorldConfig(_Section):
    """Parameters of the seeded synthetic world."""

    concepts: int = Field(8, ge=2)
    image_dim: int = Field(64, ge=1)
    text_dim: int = Field(64, ge=1)
    attributes: int = Field(5, ge=5)
    noise_std: float = Field(0.5, gt=0)
    degraded_noise_std: float = Field(1.5, gt=0)
    augment_std: float = Field(0.1, ge=0)
    attribute_scale: float = Field(1.0, ge=0)
    text_attribute_weight: float = Field(0.6, ge=0)
    unlabeled_concepts: int = Field(16, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_noise(self) -> "WorldConfig":
        if self.degraded_noise_std <= self.noise_std:
            raise ValueError("degraded_noise_std must exceed noise_std")
        return self


class DatasetSizes(_Section):
    """Number of samples generated per dataset."""

    pretrain: int = Field(2000, ge=1)
    unlabeled: int = Field(10000, ge=1)
    finetune: int = Field(1000, ge=10)
    degraded: int = Field(50, ge=10)
    holdout: int = Field(500, ge=1)


class EncoderSpec(_Section):
    """Multilayer-perceptron image encoder description."""

    name: str
    input_dim: int = Field(..., ge=1)
    hidden: Tuple[int, ...] = ()
    output_dim: int = Field(..., ge=1)
    activation: Literal["relu"] = "relu"

    @field_validator("hidden")
    @classmethod
    def _check_hidden(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(width < 1 for width in value):
            raise ValueError("all hidden widths must be >= 1")
        return value

    @property
    def widths(self) -> List[int]:
        """Layer widths from input to output."""
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer."""
        widths = self.widths
        return list(zip(widths[:-1], widths[1:]))


class TrainConfig(_Section):
    """Hyperparameters of one training stage."""

    lambda_: float = Field(0.1, alias="lambda", ge=0)
    alpha: float = Field(0.5, ge=0, le=1)
    tau: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(50, ge=1)
    initial_lr: float = Field(0.1, ge=0)
    final_lr: float = Field(0.0, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(4e-5, ge=0)
    warmup_epochs: int = Field(5, ge=0)
    augment: bool = True
    seed: Optional[int] = None
    stage: Literal["teacher", "predistill", "vlcd", "kd-baseline", "no-kd", "nd-class"] = "vlcd"


def _stage_default(stage: str, **overrides: Any) -> TrainConfig:
    return TrainConfig(stage=stage, **overrides)


class StageConfigs(_Section):
    """Training configuration per stage; baselines reuse the vlcd block."""

    teacher: TrainConfig = Field(default_factory=lambda: _stage_default("teacher"))
    predistill: TrainConfig = Field(
        default_factory=lambda: _stage_default("predistill", max_epochs=1, warmup_epochs=0, augment=False)
    )
    vlcd: TrainConfig = Field(default_factory=lambda: _stage_default("vlcd"))


class ProbeConfig(_Section):
    """Linear-probe logistic regression settings."""

    c: float = Field(3.16, gt=0)
    max_iter: int = Field(1000, ge=1)
    tol: float = Field(1e-8, gt=0)
    standardize: bool = False


class EvalConfig(_Section):
    """Evaluation protocol settings."""

    splits: int = Field(5, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    retrieval_batch: int = Field(100, ge=2)
    bench_batch: int = Field(64, ge=1)
    bench_repeats: int = Field(5, ge=3)


def _default_teacher() -> EncoderSpec:
    return EncoderSpec(name="teacher-mlp", input_dim=64, hidden=(128, 128, 128), output_dim=64)


def _default_student() -> EncoderSpec:
    return EncoderSpec(name="student-mlp", input_dim=64, hidden=(64, 64), output_dim=64)


def _default_alt_students() -> List[EncoderSpec]:
    return [
        EncoderSpec(name="student-deep", input_dim=64, hidden=(48, 48, 48), output_dim=64),
        EncoderSpec(name="student-wide", input_dim=64, hidden=(96,), output_dim=64),
    ]


class ExperimentConfig(_Section):
    """Complete experiment description, loaded from a JSON file."""

    seed: int = 1234
    output_dir: str = "desk"
    world: WorldConfig = Field(default_factory=WorldConfig)
    data: DatasetSizes = Field(default_factory=DatasetSizes)
    teacher: EncoderSpec = Field(default_factory=_default_teacher)
    student: EncoderSpec = Field(default_factory=_default_student)
    alt_students: List[EncoderSpec] = Field(default_factory=_default_alt_students)
    train: StageConfigs = Field(default_factory=StageConfigs)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_dims(self) -> "ExperimentConfig":
        for spec in [self.teacher, self.student, *self.alt_students]:
            if spec.input_dim != self.world.image_dim:
                raise ValueError(
                    f"encoder {spec.name}: input_dim {spec.input_dim} != world.image_dim {self.world.image_dim}"
                )
            if spec.output_dim != self.world.text_dim:
                raise ValueError(
                    f"encoder {spec.name}: output_dim {spec.output_dim} != world.text_dim {self.world.text_dim}"
                )
        return self

    def world_config(self) -> WorldConfig:
        """World config with the seed resolved from the global seed when unset."""
        if self.world.seed is None:
            return self.world.model_copy(update={"seed": self.seed})
        return self.world

    def stage_config(self, stage: str) -> TrainConfig:
        """Training config for a stage; baseline stages share the vlcd block."""
        if stage in ("teacher", "predistill", "vlcd"):
            return getattr(self.train, stage)
        return self.train.vlcd.model_copy(update={"stage": stage})


def canonical_json(model: BaseModel) -> str:
    """Sorted-key compact JSON dump used for hashing and snapshots."""
    return json.dumps(model.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))


def config_hash(model: BaseModel) -> str:
    """SHA-256 of a config section's canonical JSON."""
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()


def experiment_hash(config: ExperimentConfig) -> str:
    """Config hash of an experiment, ignoring where its results are written."""
    payload = config.model_dump(mode="json", by_alias=True, exclude={"output_dir"})
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def resolve_output_dir(config: ExperimentConfig, out: Optional[str] = None) -> Path:
    """--out wins; a relative output_dir lives under the settings runs_dir."""
    if out:
        return Path(out)
    path = Path(config.output_dir)
    return path if path.is_absolute() else Path(get_settings().runs_dir) / path


def _describe_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def parse_experiment_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate experiment JSON, reporting line/field diagnostics."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}")

    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top-level JSON value must be an object")

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]["loc"] if e.errors() else ()
        raise ConfigError(f"{source}: {_describe_validation_error(e)}", ".".join(str(p) for p in first))


def load_experiment_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Load the experiment config from a JSON file, applying CLI overrides."""
    config_path = Path(path or get_settings().default_config)
    try:
        text = config_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}")

    config = parse_experiment_config(text, source=str(config_path))
    if overrides:
        updates = {key: value for key, value in overrides.items() if value is not None}
        if updates:
            config = config.model_copy(update=updates)
    return config


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
