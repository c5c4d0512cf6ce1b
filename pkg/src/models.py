import math
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import InvalidConfigError


class SupervisionKind(str, Enum):
    MINIMAL = "minimal"
    ORACLE = "oracle"
    SELF_LABEL = "self_label"
    SELF_DISTIL = "self_distil"


class ClassifierInput(str, Enum):
    POST_BACKBONE = "post_backbone"
    POST_PROJECTOR = "post_projector"


class TrainingMode(str, Enum):
    JOINT = "joint"
    DECOUPLED = "decoupled"


class OldClassSelection(str, Enum):
    SHUFFLE = "shuffle"
    INDEX = "index"


class GenConfig(BaseModel):
    """
    Parameters of a synthetic GCD instance.

    Class means are random unit directions scaled by `class_radius`; samples
    are the mean plus isotropic Gaussian noise of std `class_std`.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = Field(10, ge=2)
    old_class_fraction: float = 0.5
    labelled_image_fraction: float = 0.5
    samples_per_class: int = Field(200, ge=2)
    long_tail_exponent: float = Field(0.0, ge=0.0)
    feature_dim: int = Field(32, ge=1)
    class_radius: float = Field(8.0, gt=0.0)
    class_std: float = Field(1.0, gt=0.0)
    old_class_selection: OldClassSelection = OldClassSelection.SHUFFLE
    seed: int = Field(0, ge=0)

    @field_validator("old_class_fraction", "labelled_image_fraction")
    @classmethod
    def _fraction_in_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {value}")
        return value


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    feature_dim: int = Field(32, ge=1)
    hidden_dim: int = Field(64, ge=1)
    projection_dim: int = Field(32, ge=1)
    num_prototypes: int = 10
    backbone_layers: int = Field(2, ge=1)
    projector_layers: int = Field(2, ge=1)
    projector_bias: bool = True
    classifier_input: ClassifierInput = ClassifierInput.POST_BACKBONE
    seed: int = Field(0, ge=0)

    @field_validator("num_prototypes")
    @classmethod
    def _at_least_two(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"num_prototypes must be >= 2, got {value}")
        return value

    @property
    def prototype_dim(self) -> int:
        if self.classifier_input is ClassifierInput.POST_PROJECTOR:
            return self.projection_dim
        return self.hidden_dim


class SupervisionMode(BaseModel):
    """One of the four supervision settings with its own parameters."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: SupervisionKind = SupervisionKind.SELF_DISTIL
    sinkhorn_iters: int = Field(3, ge=1)
    sinkhorn_reg: float = Field(0.05, gt=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(200, ge=1)
    batch_size: int = Field(128, ge=2)
    lr: float = Field(0.1, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    sup_weight: float = Field(0.35, ge=0.0, le=1.0)
    tau_u: float = Field(0.07, gt=0.0)
    tau_c: float = Field(1.0, gt=0.0)
    tau_s: float = Field(0.1, gt=0.0)
    tau_t_start: float = Field(0.07, gt=0.0)
    tau_t_end: float = Field(0.04, gt=0.0)
    tau_t_warmup_epochs: int = Field(30, ge=0)
    teacher_warmup: bool = True
    entropy_weight: float = Field(1.0, ge=0.0)
    exclude_positive: bool = False
    num_prototypes: Optional[int] = None
    classifier_input: ClassifierInput = ClassifierInput.POST_BACKBONE
    training: TrainingMode = TrainingMode.JOINT
    supervision: SupervisionMode = Field(default_factory=SupervisionMode)
    noise_std: float = Field(1.5, ge=0.0)
    mask_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    eval_every: int = Field(1, ge=1)
    rematch_splits: bool = False
    active_min_count: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("num_prototypes")
    @classmethod
    def _prototypes_at_least_two(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 2:
            raise ValueError(f"num_prototypes must be >= 2, got {value}")
        return value


class LossBreakdown(BaseModel):
    """Scalar parts of the objective and their weighted total."""

    rep_unsup: float = 0.0
    rep_sup: float = 0.0
    cls_unsup_ce: float = 0.0
    mean_entropy: float = 0.0
    cls_sup: float = 0.0
    total: float = 0.0

    def reconstruct(self, sup_weight: float, entropy_weight: float) -> float:
        """Recomputes the total from the parts with the given weights."""
        lam = sup_weight
        return ((1.0 - lam) * self.rep_unsup + lam * self.rep_sup
                + (1.0 - lam) * (self.cls_unsup_ce - entropy_weight * self.mean_entropy)
                + lam * self.cls_sup)

    def serialize(self) -> Dict[str, float]:
        return self.model_dump()

    @classmethod
    def mean_of(cls, items: List["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        fields = cls.model_fields.keys()
        return cls(**{name: float(np.mean([getattr(item, name) for item in items])) for name in fields})


class AccReport(BaseModel):
    acc_all: float
    acc_old: float
    acc_new: float
    permutation: Dict[int, int]
    num_samples: int
    num_old: int
    num_new: int
    correct_old: int
    correct_new: int
    nmi: float = 0.0
    ari: float = 0.0

    @model_validator(mode="after")
    def _consistent_counts(self) -> "AccReport":
        if self.num_samples != self.num_old + self.num_new:
            raise ValueError("split counts do not add up to the evaluation size")
        expected = (self.correct_old + self.correct_new) / self.num_samples
        if not math.isclose(expected, self.acc_all, abs_tol=1e-12):
            raise ValueError("acc_all is inconsistent with the split counts")
        return self

    def serialize(self) -> Dict[str, Any]:
        data = self.model_dump()
        data["permutation"] = {str(k): v for k, v in self.permutation.items()}
        return data


class ErrorTaxonomy(BaseModel):
    """Error mass of the zero-diagonal confusion matrix, sliced at the Old/New boundary."""

    true_old: float
    false_new: float
    false_old: float
    true_new: float

    @property
    def total(self) -> float:
        return self.true_old + self.false_new + self.false_old + self.true_new

    def serialize(self) -> Dict[str, float]:
        return self.model_dump()


class PredHistogram(BaseModel):
    predicted_counts: List[int]
    true_counts: List[int]

    @model_validator(mode="after")
    def _same_mass(self) -> "PredHistogram":
        if sum(self.predicted_counts) != sum(self.true_counts):
            raise ValueError("predicted and true histograms must have the same mass")
        return self

    def serialize(self) -> Dict[str, Any]:
        return self.model_dump()


class EvaluationReport(BaseModel):
    """Everything written to report.json."""

    acc: AccReport
    taxonomy: ErrorTaxonomy
    histogram: PredHistogram
    active_prototypes: int
    num_prototypes: int
    marginal_kl: float
    extra: Dict[str, Any] = Field(default_factory=dict)

    def serialize(self) -> Dict[str, Any]:
        return {
            "acc": self.acc.serialize(),
            "taxonomy": self.taxonomy.serialize(),
            "histogram": self.histogram.serialize(),
            "active_prototypes": self.active_prototypes,
            "num_prototypes": self.num_prototypes,
            "marginal_kl": self.marginal_kl,
            "extra": self.extra,
        }

    def flat_metrics(self) -> Dict[str, Any]:
        return {
            "acc_all": self.acc.acc_all,
            "acc_old": self.acc.acc_old,
            "acc_new": self.acc.acc_new,
            "nmi": self.acc.nmi,
            "ari": self.acc.ari,
            "marginal_kl": self.marginal_kl,
            "active_prototypes": self.active_prototypes,
            "taxonomy": self.taxonomy.serialize(),
        }


class KmeansResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations_run: int
    objective_history: List[float] = Field(default_factory=list)
    assignment_history: List[np.ndarray] = Field(default_factory=list)


class MetricsRecord(BaseModel):
    """One line of metrics.jsonl; evaluation fields are null on epochs that skip evaluation."""

    epoch: int
    lr: float
    tau_t: float
    losses: LossBreakdown
    acc_all: Optional[float] = None
    acc_old: Optional[float] = None
    acc_new: Optional[float] = None
    taxonomy: Optional[ErrorTaxonomy] = None
    active_prototypes: Optional[int] = None
    marginal_kl: Optional[float] = None
    skipped_batches: int = 0

    def serialize(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "tau_t": self.tau_t,
            "losses": self.losses.serialize(),
            "acc_all": self.acc_all,
            "acc_old": self.acc_old,
            "acc_new": self.acc_new,
            "taxonomy": self.taxonomy.serialize() if self.taxonomy is not None else None,
            "active_prototypes": self.active_prototypes,
            "marginal_kl": self.marginal_kl,
            "skipped_batches": self.skipped_batches,
        }


class MetricsLog(BaseModel):
    records: List[MetricsRecord] = Field(default_factory=list)

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None


# Cumulative ablation steps from the non-parametric baseline to the full method.
PRESETS: Dict[str, Dict[str, Any]] = {
    "sl": {"supervision": "self_label", "classifier_input": "post_projector",
           "training": "decoupled", "teacher_warmup": False},
    "br": {"supervision": "self_label", "classifier_input": "post_backbone",
           "training": "decoupled", "teacher_warmup": False},
    "sd": {"supervision": "self_distil", "classifier_input": "post_backbone",
           "training": "decoupled", "teacher_warmup": False},
    "tw": {"supervision": "self_distil", "classifier_input": "post_backbone",
           "training": "decoupled", "teacher_warmup": True},
    "jt": {"supervision": "self_distil", "classifier_input": "post_backbone",
           "training": "joint", "teacher_warmup": True},
}


def layer_preset(defaults: Dict[str, Any], values: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merges `defaults` < preset fields < `values`.

    The preset named in `values` wins over one named in `defaults`, and keys
    set in `values` win over the preset's fields.

    Raises:
        ValueError: Unknown preset name.
    """
    preset = values.get("preset", defaults.get("preset"))
    if preset is not None and preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    return {**defaults, **PRESETS.get(preset, {}), **values}


class ExperimentConfig(BaseModel):
    """
    Flat key-value document describing one experiment.

    Unknown keys are rejected. `to_gen_config`, `to_model_config` and
    `to_train_config` split it into the per-module configs.
    """
    model_config = ConfigDict(extra="forbid", use_enum_values=True)

    # synthetic data
    num_classes: int = 10
    old_class_fraction: float = 0.5
    labelled_image_fraction: float = 0.5
    samples_per_class: int = 200
    long_tail_exponent: float = 0.0
    feature_dim: int = 32
    class_radius: float = 8.0
    class_std: float = 1.0
    old_class_selection: OldClassSelection = OldClassSelection.SHUFFLE
    data_seed: int = Field(0, ge=0)

    # network
    hidden_dim: int = 64
    projection_dim: int = 32
    backbone_layers: int = 2
    projector_layers: int = 2
    projector_bias: bool = True
    num_prototypes: Optional[int] = None

    # optimisation and objective
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    sup_weight: float = 0.35
    tau_u: float = 0.07
    tau_c: float = 1.0
    tau_s: float = 0.1
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: int = 30
    teacher_warmup: bool = True
    entropy_weight: float = 1.0
    exclude_positive: bool = False

    # ablation toggles
    classifier_input: ClassifierInput = ClassifierInput.POST_BACKBONE
    training: TrainingMode = TrainingMode.JOINT
    supervision: SupervisionKind = SupervisionKind.SELF_DISTIL
    sinkhorn_iters: int = 3
    sinkhorn_reg: float = 0.05
    preset: Optional[str] = None

    # views
    noise_std: float = 1.5
    mask_fraction: float = 0.1

    # evaluation
    eval_every: int = 1
    rematch_splits: bool = False
    active_min_count: int = 1

    seed: int = Field(0, ge=0)
    output_dir: str = "runs"

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = layer_preset({}, data)
        return data

    @property
    def resolved_prototypes(self) -> int:
        return self.num_prototypes if self.num_prototypes is not None else self.num_classes

    def to_gen_config(self) -> GenConfig:
        return _build(GenConfig,
                      num_classes=self.num_classes,
                      old_class_fraction=self.old_class_fraction,
                      labelled_image_fraction=self.labelled_image_fraction,
                      samples_per_class=self.samples_per_class,
                      long_tail_exponent=self.long_tail_exponent,
                      feature_dim=self.feature_dim,
                      class_radius=self.class_radius,
                      class_std=self.class_std,
                      old_class_selection=self.old_class_selection,
                      seed=self.data_seed)

    def to_model_config(self, feature_dim: Optional[int] = None,
                        num_prototypes: Optional[int] = None) -> ModelConfig:
        return _build(ModelConfig,
                      feature_dim=feature_dim or self.feature_dim,
                      hidden_dim=self.hidden_dim,
                      projection_dim=self.projection_dim,
                      num_prototypes=num_prototypes or self.resolved_prototypes,
                      backbone_layers=self.backbone_layers,
                      projector_layers=self.projector_layers,
                      projector_bias=self.projector_bias,
                      classifier_input=self.classifier_input,
                      seed=self.seed)

    def to_train_config(self) -> TrainConfig:
        supervision = _build(SupervisionMode, kind=self.supervision,
                             sinkhorn_iters=self.sinkhorn_iters,
                             sinkhorn_reg=self.sinkhorn_reg)
        return _build(TrainConfig,
                      epochs=self.epochs,
                      batch_size=self.batch_size,
                      lr=self.lr,
                      momentum=self.momentum,
                      weight_decay=self.weight_decay,
                      sup_weight=self.sup_weight,
                      tau_u=self.tau_u,
                      tau_c=self.tau_c,
                      tau_s=self.tau_s,
                      tau_t_start=self.tau_t_start,
                      tau_t_end=self.tau_t_end,
                      tau_t_warmup_epochs=self.tau_t_warmup_epochs,
                      teacher_warmup=self.teacher_warmup,
                      entropy_weight=self.entropy_weight,
                      exclude_positive=self.exclude_positive,
                      num_prototypes=self.num_prototypes,
                      classifier_input=self.classifier_input,
                      training=self.training,
                      supervision=supervision,
                      noise_std=self.noise_std,
                      mask_fraction=self.mask_fraction,
                      eval_every=self.eval_every,
                      rematch_splits=self.rematch_splits,
                      active_min_count=self.active_min_count,
                      seed=self.seed)

    def serialize(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _build(model_cls, **values: Any):
    """Instantiates a config model, turning validation errors into InvalidConfigError."""
    try:
        return model_cls(**values)
    except ValueError as e:
        raise InvalidConfigError(f"invalid {model_cls.__name__}: {e}") from e
