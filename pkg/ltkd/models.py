from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


RegionTag = Literal["optic_disc", "macula", "vessels", "global"]
REGION_ORDER: Tuple[RegionTag, ...] = ("optic_disc", "macula", "vessels", "global")
StrategyKind = Literal["shot_based", "region_based", "feature_based"]
ShotBand = Literal["head", "medium", "tail"]
WeightsMode = Literal["dynamic", "fixed", "off"]
KlDirection = Literal["student_teacher", "teacher_student"]

STRATEGY_ALIASES: Dict[str, StrategyKind] = {
    "shot": "shot_based",
    "region": "region_based",
    "feature": "feature_based",
}


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def build_config(model: type[BaseModel], **values: Any) -> Any:
    """Construct ``model`` and surface validation failures as configuration errors."""
    try:
        return model(**values)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


class ClassMeta(BaseModel):
    class_id: int = Field(ge=0)
    region_tag: RegionTag
    feature_signature: List[float]
    target_count: int = Field(ge=1)
    family: Optional[int] = None

    @field_validator("feature_signature")
    @classmethod
    def _unit_norm(cls, value: List[float]) -> List[float]:
        norm = math.sqrt(sum(v * v for v in value))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"feature signature must have unit norm, got {norm}")
        return value


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_classes: int = 20
    d_in: int = 64
    d_sig: int = 16
    head_count: int = 1400
    imbalance_ratio: float = 100.0
    cooccurrence: float = 0.3
    noise: float = 0.3
    signal_scale: float = 1.0
    n_families: int = 5
    family_spread: float = 0.35

    @model_validator(mode="after")
    def _check(self) -> GeneratorConfig:
        if self.n_classes < 3:
            raise ValueError("n_classes must be at least 3")
        if self.head_count < 1:
            raise ValueError("head_count must be at least 1")
        if not self.imbalance_ratio >= 1.0:
            raise ValueError("imbalance_ratio must be >= 1")
        if not 0.0 <= self.cooccurrence <= 1.0:
            raise ValueError("cooccurrence must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.d_sig < 1 or self.d_in < len(REGION_ORDER) * self.d_sig:
            raise ValueError("d_in must hold one d_sig-wide block per region")
        if self.n_families < 1:
            raise ValueError("n_families must be at least 1")
        return self


class SubsetStrategy(BaseModel):
    kind: StrategyKind
    parameters: Dict[str, Any] = Field(default_factory=dict)


class SubsetSpec(BaseModel):
    subset_id: int = Field(ge=0)
    class_ids: List[int]
    name: str = ""
    strategy: Optional[SubsetStrategy] = None

    @field_validator("class_ids")
    @classmethod
    def _strictly_increasing(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("a subset needs at least one class")
        if any(c < 0 for c in value) or any(a >= b for a, b in zip(value, value[1:])):
            raise ValueError(f"class ids must be non-negative and strictly increasing: {value}")
        return value


class SubsetPlan(BaseModel):
    strategy: SubsetStrategy
    subsets: List[SubsetSpec]

    def owner_of(self) -> Dict[int, int]:
        return {c: spec.subset_id for spec in self.subsets for c in spec.class_ids}


class SubsetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: StrategyKind = "shot_based"
    shot_boundaries: Optional[Tuple[int, int]] = None
    n_feature_groups: int = 4
    negative_fraction: float = Field(default=0.25, ge=0.0, le=1.0)

    @field_validator("strategy", mode="before")
    @classmethod
    def _alias(cls, value: Any) -> Any:
        return STRATEGY_ALIASES.get(value, value)


class SubsetBalance(BaseModel):
    subset_id: int
    imbalance_ratio: float
    probability_gap: float
    cooccurrence_mass: int
    exceeds_original: bool


class BalanceReport(BaseModel):
    original_imbalance_ratio: float
    original_probability_gap: float
    original_cooccurrence_mass: int
    subsets: List[SubsetBalance]

    @property
    def subset_cooccurrence_mass(self) -> int:
        return sum(s.cooccurrence_mass for s in self.subsets)

    def flagged(self) -> List[int]:
        return [s.subset_id for s in self.subsets if s.exceeds_original]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=100, ge=0)
    initial_lr: float = Field(default=1e-4, gt=0)
    lr_floor: float = Field(default=1e-7, gt=0)
    plateau_patience: int = Field(default=5, ge=1)
    plateau_factor: float = Field(default=0.1, gt=0, lt=1)
    batch_size: int = Field(default=64, ge=1)
    min_steps_per_epoch: int = Field(default=1, ge=1)
    temperature: float = Field(default=10.0, gt=0)
    delta: float = Field(default=0.6, gt=0, lt=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [64])
    seed: int = Field(default=0, ge=0)
    weights_mode: WeightsMode = "dynamic"
    kl_direction: KlDirection = "student_teacher"
    t_squared: bool = False
    class_reduction: Literal["sum", "mean"] = "sum"

    @field_validator("temperature")
    @classmethod
    def _finite_temperature(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("temperature must be finite")
        return value

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, value: List[int]) -> List[int]:
        if any(d <= 0 for d in value):
            raise ValueError("hidden widths must be positive")
        return value


class GroupAssignment(BaseModel):
    groups: Dict[int, ShotBand]

    def members(self, band: ShotBand) -> List[int]:
        return sorted(c for c, b in self.groups.items() if b == band)


class Provenance(BaseModel):
    seed: int
    config_hash: str
    dataset_hash: str
    split: str = "test"


class EvalReport(BaseModel):
    run_label: str
    class_ids: List[int]
    per_class_ap: List[Optional[float]]
    map_total: Optional[float]
    map_head: Optional[float]
    map_medium: Optional[float]
    map_tail: Optional[float]
    n_eval_instances: int
    skipped_classes: List[int]
    groups: GroupAssignment
    provenance: Provenance


class ComparisonRow(BaseModel):
    run_label: str
    head: Optional[float]
    medium: Optional[float]
    tail: Optional[float]
    total: Optional[float]
    delta_head: Optional[float]
    delta_medium: Optional[float]
    delta_tail: Optional[float]
    delta_total: Optional[float]
    per_class_delta: List[Optional[float]]


class ComparisonTable(BaseModel):
    baseline_label: str
    dataset_hash: str
    class_ids: List[int]
    rows: List[ComparisonRow]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    subsets: SubsetConfig = Field(default_factory=SubsetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    kd: bool = True
    seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = None

    def config_hash(self) -> str:
        return content_hash(self.model_dump(mode="json", exclude={"output_dir"}))


class TeacherEntry(BaseModel):
    subset_id: int
    seed: int
    file: str


class RunManifest(BaseModel):
    format_version: int = 1
    run_label: str
    kind: Literal["erm", "kd"]
    config: ExperimentConfig
    config_hash: str
    seed: int
    dataset_hash: str
    strategy: Optional[StrategyKind] = None
    teachers: List[TeacherEntry] = Field(default_factory=list)
    sparse_classes: List[int] = Field(default_factory=list)
    files: Dict[str, str] = Field(default_factory=dict)


class ExperimentPreset(BaseModel):
    id: str
    description: str = ""
    config: ExperimentConfig


class ComparisonArtifact(BaseModel):
    title: str
    content: str
    payload: str
    table: ComparisonTable
