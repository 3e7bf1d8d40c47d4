"""RunConfig schema, loading and validation diagnostics."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from model_zoo import VARIANTS, ModelConfig, validate_dims
from synth_data import HESITATION_STEP, CorpusConfig, QualityProfile
from training import FEW_SHOT_SIZES, FewShotConfig, LossConfig, TrainRunConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a run configuration cannot be loaded or fails validation."""

    def __init__(self, message: str, errors: Optional[List[str]] = None) -> None:
        super().__init__(message)
        self.errors = errors or []


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProfileSection(_Section):
    hesitation_factor: float = Field(1.0, ge=1.0)
    volume_offset_db: float = 0.0
    noise_sigma: float = Field(0.0, ge=0.0)

    @field_validator("hesitation_factor")
    @classmethod
    def on_hesitation_grid(cls, value: float) -> float:
        steps = round((value - 1.0) / HESITATION_STEP)
        if abs(steps * HESITATION_STEP - (value - 1.0)) > 1e-9:
            raise ValueError(f"must be 1 plus a multiple of {HESITATION_STEP}")
        return value

    def to_profile(self) -> QualityProfile:
        return QualityProfile(self.hesitation_factor, self.volume_offset_db, self.noise_sigma)


class TaskMixSection(_Section):
    document: float = Field(0.6, ge=0.0)
    transcription: float = Field(0.2, ge=0.0)
    translation: float = Field(0.2, ge=0.0)


class DataSection(_Section):
    topics: int = Field(12, ge=2)
    examples_per_topic: int = Field(100, ge=1)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 7
    world_seed: int = 1234
    vocab_size: int = Field(512, ge=64)
    z_dim: int = Field(16, ge=2)
    query_keywords: int = Field(4, ge=1)
    query_fillers: int = Field(2, ge=0)
    doc_length_factor: int = Field(2, ge=2)
    frame_dim: int = Field(16, ge=1)
    frames_per_token: int = Field(2, ge=1)
    frame_seconds: float = Field(0.25, gt=0.0)
    frame_noise: float = Field(0.05, ge=0.0)
    topic_spread: float = Field(0.35, ge=0.0)
    word_temperature: float = Field(0.25, gt=0.0)
    entity_count: int = Field(32, ge=0)
    entities_per_topic: int = Field(4, ge=0)
    query_entities: int = Field(1, ge=0)
    profile: ProfileSection = ProfileSection()
    degraded_profile: ProfileSection = ProfileSection(hesitation_factor=2.2, volume_offset_db=-25.0, noise_sigma=0.01)
    intent_classes: int = Field(10, ge=2)
    intent_examples_per_class: int = Field(40, ge=2)
    keyword_count: int = Field(12, ge=2)
    keyword_queries_per_keyword: int = Field(12, ge=1)
    task_mix: TaskMixSection = TaskMixSection()

    @model_validator(mode="after")
    def entities_fit(self) -> "DataSection":
        if not self.query_entities <= self.entities_per_topic <= self.entity_count:
            raise ValueError("needs query_entities <= entities_per_topic <= entity_count")
        return self


class ModelSection(_Section):
    variants: List[str] = Field(default_factory=lambda: list(VARIANTS))
    hidden: int = Field(64, ge=2)
    d_max: int = Field(64, ge=1)
    dims: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    blocks: int = Field(2, ge=1)
    max_length: int = Field(64, ge=4)
    layer_count: int = Field(1, ge=1)
    conv_kernel: int = Field(3, ge=1)
    conv_stride: int = Field(2, ge=1)
    normalize_prefix: bool = True

    @field_validator("variants")
    @classmethod
    def known_variants(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; expected a subset of {list(VARIANTS)}")
        if not value:
            raise ValueError("at least one variant is required")
        if any(v != "text-only" for v in value) and "text-only" not in value:
            raise ValueError("speech variants need 'text-only' trained first")
        return [v for v in VARIANTS if v in value]

    @model_validator(mode="after")
    def dims_end_at_d_max(self) -> "ModelSection":
        validate_dims(self.dims, self.d_max)
        return self


def _per_variant(value: Union[int, float]) -> Dict[str, Any]:
    return {variant: value for variant in VARIANTS}


class TrainSection(_Section):
    epochs: Dict[str, int] = Field(default_factory=lambda: _per_variant(3))
    batch_size: int = Field(16, ge=2)
    learning_rate: Dict[str, float] = Field(default_factory=lambda: _per_variant(0.05))
    temperature: float = Field(0.05, gt=0.0)
    seed: int = 11

    @field_validator("epochs", "learning_rate")
    @classmethod
    def every_variant(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        missing = [v for v in VARIANTS if v not in value]
        unknown = [v for v in value if v not in VARIANTS]
        if missing or unknown:
            raise ValueError(f"needs exactly the keys {list(VARIANTS)} (missing {missing}, unknown {unknown})")
        if any(x < 0 for x in value.values()):
            raise ValueError("values must be >= 0")
        return value


class IndexSection(_Section):
    created_at: int = 0


class EvalSection(_Section):
    k_list: List[int] = Field(default_factory=lambda: [5, 10])
    n_shots: List[int] = Field(default_factory=lambda: list(FEW_SHOT_SIZES))
    corruption_rate: float = Field(0.2, ge=0.0, le=1.0)
    fewshot_variant: str = "late-fusion"
    fewshot_epochs: int = Field(1, ge=0)
    fewshot_learning_rate: float = Field(0.05, ge=0.0)
    fewshot_max_pairs: int = Field(2000, ge=1)
    energy_ratios: List[float] = Field(default_factory=lambda: [0.9, 0.95, 0.99, 1.0])
    centered_covariance: bool = True

    @field_validator("n_shots")
    @classmethod
    def known_shots(cls, value: List[int]) -> List[int]:
        bad = [n for n in value if n not in FEW_SHOT_SIZES]
        if bad or not value:
            raise ValueError(f"n_shots must be a nonempty subset of {list(FEW_SHOT_SIZES)}")
        return sorted(set(value))

    @field_validator("k_list")
    @classmethod
    def positive_k(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("k_list needs positive cutoffs")
        return sorted(set(value))

    @field_validator("energy_ratios")
    @classmethod
    def ratios_in_range(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < r <= 1.0 for r in value):
            raise ValueError("energy ratios must be in (0, 1]")
        return value


class BenchSection(_Section):
    repetitions: int = Field(5, ge=3)
    queries: int = Field(50, ge=1)
    k: int = Field(1, ge=1)


class RunConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    index: IndexSection = IndexSection()
    eval: EvalSection = EvalSection()
    bench: BenchSection = BenchSection()

    @model_validator(mode="after")
    def cross_section_checks(self) -> "RunConfig":
        if max(self.eval.n_shots) >= self.data.intent_examples_per_class:
            raise ValueError(
                f"eval.n_shots max {max(self.eval.n_shots)} leaves no test queries; "
                f"raise data.intent_examples_per_class above it"
            )
        if self.eval.fewshot_variant not in self.model.variants or self.eval.fewshot_variant == "text-only":
            raise ValueError(f"eval.fewshot_variant must be a trained speech variant, got '{self.eval.fewshot_variant}'")
        return self

    # -- conversions into module configs --------------------------------------

    def corpus_config(self) -> CorpusConfig:
        d = self.data
        mix = d.task_mix
        return CorpusConfig(
            vocab_size=d.vocab_size, z_dim=d.z_dim, world_seed=d.world_seed, query_keywords=d.query_keywords,
            query_fillers=d.query_fillers, doc_length_factor=d.doc_length_factor, frame_dim=d.frame_dim,
            layer_count=self.model.layer_count, frames_per_token=d.frames_per_token, frame_seconds=d.frame_seconds,
            frame_noise=d.frame_noise, topic_spread=d.topic_spread, word_temperature=d.word_temperature,
            entity_count=d.entity_count, entities_per_topic=d.entities_per_topic, query_entities=d.query_entities,
            task_mix=(mix.document, mix.transcription, mix.translation),
        )

    def to_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            vocab_size=self.data.vocab_size, hidden=m.hidden, d_max=m.d_max, dims=tuple(m.dims), blocks=m.blocks,
            max_length=m.max_length, frame_dim=self.data.frame_dim, layer_count=m.layer_count,
            conv_kernel=m.conv_kernel, conv_stride=m.conv_stride, normalize_prefix=m.normalize_prefix,
        )

    def loss_config(self, variant: str) -> LossConfig:
        objective = "query-alignment" if variant == "dual-alignment" else "retrieval"
        return LossConfig(self.train.temperature, tuple(self.model.dims), objective, self.model.normalize_prefix)

    def train_run(self, variant: str) -> TrainRunConfig:
        return TrainRunConfig(
            epochs=self.train.epochs[variant], batch_size=self.train.batch_size,
            learning_rate=self.train.learning_rate[variant], max_length=self.model.max_length, seed=self.train.seed,
        )

    def fewshot_config(self) -> FewShotConfig:
        return FewShotConfig(
            n_shot=max(self.eval.n_shots), epochs=self.eval.fewshot_epochs, batch_size=self.train.batch_size,
            learning_rate=self.eval.fewshot_learning_rate, max_pairs=self.eval.fewshot_max_pairs, seed=self.train.seed,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


class ConfigValidationResult(NamedTuple):
    """Result of validating a config document."""
    is_valid: bool
    errors: List[str]
    config: Optional[RunConfig] = None


class ConfigErrorService:
    """Turns schema violations into one readable line per field."""

    @staticmethod
    def format_errors(error: ValidationError) -> List[str]:
        lines = []
        for item in error.errors():
            location = ".".join(str(part) for part in item["loc"]) or "<root>"
            message = item["msg"]
            if item["type"] == "extra_forbidden":
                message = "unknown key; check spelling against the documented sections"
            lines.append(f"{location}: {message}")
        return lines

    @staticmethod
    def validate(document: Any) -> ConfigValidationResult:
        if document is None:
            document = {}
        if not isinstance(document, dict):
            return ConfigValidationResult(False, [f"<root>: expected a mapping of sections, got {type(document).__name__}"])
        try:
            return ConfigValidationResult(True, [], RunConfig.model_validate(document))
        except ValidationError as e:
            return ConfigValidationResult(False, ConfigErrorService.format_errors(e))
        except ValueError as e:
            return ConfigValidationResult(False, [f"<root>: {e}"])

    @staticmethod
    def missing_file_message(path: Union[str, Path]) -> str:
        return f"Config file not found: {path}. Pass --config with a YAML file (see configs/default.yaml)."


def load_run_config(path: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    """Read and validate a YAML run config; ``seed`` overrides ``data.seed``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(ConfigErrorService.missing_file_message(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}")

    if seed is not None:
        document = dict(document or {})
        document["data"] = {**(document.get("data") or {}), "seed": seed}

    result = ConfigErrorService.validate(document)
    if not result.is_valid or result.config is None:
        raise ConfigError(f"Config {path} failed validation:\n  " + "\n  ".join(result.errors), result.errors)
    logger.debug(f"Loaded config {path} (hash {result.config.config_hash()[:16]})")
    return result.config
