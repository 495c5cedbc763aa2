import math
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.entity.optim import OptimizerKind


# validation Schemas

class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NeighbourSpec(Section):
    class_id: int = Field(ge=0)
    anchor: int = Field(ge=0)
    closeness: float = Field(default=0.25, ge=0)


class DatasetSpec(Section):
    kind: Literal["blobs", "idx"] = "blobs"
    num_classes: int = Field(default=10, ge=2)
    per_class: int = Field(default=100, ge=1)
    test_per_class: int = Field(default=50, ge=1)
    dim: int = Field(default=20, ge=1)
    spread: float = Field(default=1.0, ge=0)
    separation: float = Field(default=4.0, ge=0)
    neighbours: list[NeighbourSpec] = Field(default_factory=list)
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None
    subset: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_sources(self):
        if self.kind == "idx":
            missing = [
                key
                for key in ("images_path", "labels_path", "test_images_path", "test_labels_path")
                if getattr(self, key) is None
            ]
            if missing:
                raise ValueError(f"idx datasets need {', '.join(missing)}")
        for entry in self.neighbours:
            if max(entry.class_id, entry.anchor) >= self.num_classes:
                raise ValueError(f"neighbour ({entry.class_id}, {entry.anchor}) outside the class range")
        return self


class PartitionSpec(Section):
    scheme: Literal["iid", "dirichlet"] = "iid"
    clients: int = Field(default=10, ge=1)
    beta: float = Field(default=0.5, gt=0)


class LayerSpec(Section):
    type: Literal["dense", "conv2d", "relu", "batchnorm", "maxpool", "flatten"]
    units: int | None = Field(default=None, ge=1)
    filters: int | None = Field(default=None, ge=1)
    kernel: int | None = Field(default=None, ge=1)
    padding: Literal["valid", "same"] | None = None
    size: int | None = Field(default=None, ge=1)
    momentum: float | None = Field(default=None, gt=0, le=1)

    @model_validator(mode="after")
    def check_required(self):
        if self.type == "dense" and self.units is None:
            raise ValueError("dense layers need units")
        if self.type == "conv2d" and self.filters is None:
            raise ValueError("conv2d layers need filters")
        return self


class ModelSpec(Section):
    arch: str = "mlp"
    layers: list[LayerSpec] | None = None

    def descriptors(self) -> list[dict] | None:
        if self.layers is None:
            return None
        return [layer.model_dump(exclude_none=True) for layer in self.layers]


class OptimizerSpec(Section):
    kind: OptimizerKind = OptimizerKind.adam
    learning_rate: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)


class TrainingSpec(Section):
    rounds: int = Field(default=25, ge=1)
    local_epochs: int = Field(default=5, ge=0)
    batch_size: int = Field(default=64, ge=1)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)


class AttackSpec(Section):
    kind: Literal["none", "label_flip", "explicit_boost", "stealthy_altmin"] = "label_flip"
    source_class: int = Field(default=0, ge=0)
    target_class: int = Field(default=1, ge=0)
    malicious_clients: list[int] | None = None
    malicious_fraction: float = Field(default=0.1, ge=0, le=1)
    malicious_seed: int | None = None
    boost_factor: float | None = Field(default=None, gt=0)
    stealth_rho: float = Field(default=1.0, ge=0)
    stealth_benign_weight: float = Field(default=1.0, ge=0)
    altmin_schedule: tuple[int, int] = (1, 1)
    start_round: int = Field(default=1, ge=1)

    @field_validator("altmin_schedule")
    @classmethod
    def validate_schedule(cls, v):
        if min(v) < 0:
            raise ValueError("altmin steps must be non-negative")
        return v

    @model_validator(mode="after")
    def check_classes(self):
        if self.kind != "none" and self.source_class == self.target_class:
            raise ValueError("source_class and target_class must differ")
        if self.malicious_clients is not None and len(set(self.malicious_clients)) != len(self.malicious_clients):
            raise ValueError("malicious_clients contains duplicates")
        return self

    @property
    def active(self) -> bool:
        return self.kind != "none"


class SurrogateSpec(ModelSpec):
    arch: str = "identical"


class BotpaSpec(Section):
    num_intermediate: int = Field(default=2, ge=1)
    surrogate: SurrogateSpec = Field(default_factory=SurrogateSpec)
    surrogate_epochs: int = Field(default=10, ge=1)
    contrib_checkpoint_epoch: int | None = Field(default=None, ge=1)
    per_class_sample_cap: int | None = Field(default=100, ge=1)
    early_stop_accuracy: float | None = Field(default=None, gt=0, le=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    amplifier_strategy: Literal["botpa", "random"] = "botpa"
    seed: int | None = None

    @model_validator(mode="after")
    def check_checkpoint(self):
        if self.contrib_checkpoint_epoch is None:
            self.contrib_checkpoint_epoch = math.ceil(self.surrogate_epochs / 2)
        if self.contrib_checkpoint_epoch > self.surrogate_epochs:
            raise ValueError("contrib_checkpoint_epoch must not exceed surrogate_epochs")
        return self


class AggregatorSpec(Section):
    kind: Literal["fedavg", "krum", "multi_krum", "median", "trimmed_mean", "flame"] = "fedavg"
    f_byzantine: int | None = Field(default=None, ge=0)
    m_select: int | None = Field(default=None, ge=1)
    trim_fraction: float = Field(default=0.1, ge=0, lt=0.5)
    flame_lambda: float = Field(default=1e-3, gt=0)

    def summary(self) -> str:
        if self.kind in ("krum", "multi_krum"):
            extra = f"f={self.f_byzantine}" + (f",m={self.m_select}" if self.kind == "multi_krum" else "")
            return f"{self.kind}({extra})"
        if self.kind == "trimmed_mean":
            return f"{self.kind}({self.trim_fraction})"
        if self.kind == "flame":
            return f"{self.kind}({self.flame_lambda})"
        return self.kind


class MetricsSpec(Section):
    from_round: int = Field(default=1, ge=1)
    to_round: int | None = Field(default=None, ge=1)
    export_features: bool = False


class SweepSpec(Section):
    axis: Literal["malicious_fraction", "N", "beta", "aggregator"]
    values: list[Any] = Field(min_length=1)


class SelectNSpec(Section):
    values: list[int] = Field(default=[1, 2, 3], min_length=1)


class ExperimentConfig(Section):
    name: str = "experiment"
    seed: int = 0
    runs: int = Field(default=1, ge=1)
    output_dir: str | None = None
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    partition: PartitionSpec = Field(default_factory=PartitionSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    attack: AttackSpec | None = None
    botpa: BotpaSpec | None = None
    aggregator: AggregatorSpec = Field(default_factory=AggregatorSpec)
    metrics: MetricsSpec = Field(default_factory=MetricsSpec)
    sweep: SweepSpec | None = None
    select_n: SelectNSpec | None = None

    @model_validator(mode="after")
    def check_consistency(self):
        classes = self.dataset.num_classes
        clients = self.partition.clients
        if self.metrics.to_round is None:
            self.metrics.to_round = self.training.rounds
        if not 1 <= self.metrics.from_round <= self.metrics.to_round <= self.training.rounds:
            raise ValueError(
                f"metrics window [{self.metrics.from_round}, {self.metrics.to_round}] outside [1, {self.training.rounds}]"
            )
        if self.botpa is not None:
            if self.attack is None or not self.attack.active:
                raise ValueError("botpa boosts an attack; add an attack section")
            if self.botpa.num_intermediate > classes - 2:
                raise ValueError(
                    f"botpa.num_intermediate={self.botpa.num_intermediate} exceeds num_classes - 2 = {classes - 2}"
                )
        attackers = 0
        if self.attack is not None and self.attack.active:
            for key in ("source_class", "target_class"):
                if getattr(self.attack, key) >= classes:
                    raise ValueError(f"attack.{key} outside [0, {classes})")
            if self.attack.malicious_clients is not None and any(
                not 0 <= c < clients for c in self.attack.malicious_clients
            ):
                raise ValueError(f"attack.malicious_clients outside [0, {clients})")
            attackers = self.malicious_count()
            if attackers == 0:
                raise ValueError("an active attack needs at least one malicious client")
            if attackers > clients:
                raise ValueError(f"{attackers} malicious clients but only {clients} clients")
        spec = self.aggregator
        if spec.kind in ("krum", "multi_krum"):
            f = attackers if spec.f_byzantine is None else spec.f_byzantine
            if 1 < clients < 2 * f + 3:
                raise ValueError(f"{spec.kind} needs clients >= 2f + 3, got n={clients}, f={f}")
            if spec.kind == "multi_krum" and spec.m_select is not None and spec.m_select > clients:
                raise ValueError(f"aggregator.m_select={spec.m_select} exceeds clients={clients}")
        if spec.kind == "flame" and clients < 3:
            raise ValueError("flame needs at least 3 clients")
        return self

    def malicious_count(self) -> int:
        if self.attack is None or not self.attack.active:
            return 0
        if self.attack.malicious_clients is not None:
            return len(self.attack.malicious_clients)
        return int(round(self.attack.malicious_fraction * self.partition.clients))

    def krum_f(self) -> int:
        if self.aggregator.f_byzantine is not None:
            return self.aggregator.f_byzantine
        return self.malicious_count()

    def boost_factor(self) -> float:
        """Explicit boost factor; defaults to ``clients / malicious``."""
        if self.attack is not None and self.attack.boost_factor is not None:
            return self.attack.boost_factor
        attackers = self.malicious_count()
        return self.partition.clients / attackers if attackers else 1.0
