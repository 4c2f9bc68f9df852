"""Run configuration: JSON-serializable, schema-checked.

`TrainingConfig` defaults are the published large-scale values; call
`desk_profile()` for settings sized to seconds-scale synthetic runs.  Every
hyperparameter that the protocol consumes has a named key here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .backbone import BackboneConfig
from .errors import ArgumentError


def _from_mapping(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class TrainingConfig:
    optimizer: str = "adamw"

    # self-supervised phase (teacher/student distillation)
    ssl_lr: float = 2.5e-4
    ssl_classifier_lr: float = 2.5e-4  # projection-head group
    ssl_weight_decay: float = 0.04
    ssl_weight_decay_end: float = 0.4
    ssl_epochs: int = 500
    ssl_early_stop: int = 30
    ssl_batch_size: int = 70
    teacher_temp: float = 0.07
    warmup_teacher_temp: float = 0.04
    warmup_fraction: float = 0.1
    student_temp: float = 0.1
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    n_local_crops: int = 4
    global_crop_scale: tuple = (0.6, 1.0)
    local_crop_scale: tuple = (0.2, 0.5)
    proj_hidden_dim: int = 64
    proj_dim: int = 32

    # supervised phase on the base task
    sup_lr: float = 1e-5
    sup_classifier_lr: float = 0.01
    sup_plateau_patience: int = 10
    sup_plateau_factor: float = 0.25
    sup_min_lr: float = 3e-5
    sup_epochs: int = 1000
    sup_early_stop: int = 30
    sup_batch_size: int = 230
    sup_weight_decay: float = 3e-6

    # incremental sessions (delta parameters + new classifier rows)
    inc_lr: float = 0.01
    inc_plateau_patience: int = 5
    inc_plateau_factor: float = 0.25
    inc_min_lr: float = 0.0
    inc_epochs_base: int = 4
    inc_epochs: int = 15
    inc_batch_size: int = 200
    inc_weight_decay: float = 0.0
    inc_early_stop: int = 0  # 0 disables
    prefix_len: int = 16
    outliers_base: int = 5
    outliers_inc: int = 1
    pseudo_stats: str = "all"  # off | inc | all: enrich Gaussian stats with pseudo-labeled pool samples
    pseudo_prednet: str = "inc"  # off | inc | all: enrich prediction-net pairs

    # prediction network
    prednet_lr: float = 1e-3
    prednet_epochs: int = 300
    prednet_batch_size: int = 100
    prednet_weight_decay: float = 0.0
    prednet_depth: int = 2

    # linear probe diagnostic (frozen teacher)
    run_probe: bool = False
    probe_optimizer: str = "adam"
    probe_lr: float = 1e-3
    probe_batch_size: int = 100
    probe_epochs: int = 200
    probe_early_stop: int = 10

    # stochastic classifier
    head_temperature: float = 16.0
    head_offset: float = 4.0
    head_noise_train: bool = True
    head_noise_eval: bool = False
    rectify_head_means: bool = True

    def __post_init__(self):
        self.global_crop_scale = tuple(self.global_crop_scale)
        self.local_crop_scale = tuple(self.local_crop_scale)
        for key in ("pseudo_stats", "pseudo_prednet"):
            if getattr(self, key) not in ("off", "inc", "all"):
                raise ArgumentError(f"{key} must be one of off/inc/all")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_crop_scale"] = list(self.global_crop_scale)
        d["local_crop_scale"] = list(self.local_crop_scale)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        return _from_mapping(cls, data)


def desk_profile(**overrides) -> TrainingConfig:
    """Training settings sized for synthetic desk-scale runs."""
    cfg = TrainingConfig(
        ssl_epochs=30,
        ssl_early_stop=10,
        ssl_batch_size=64,
        ssl_lr=1e-3,
        ssl_classifier_lr=1e-3,
        sup_lr=1e-3,
        sup_classifier_lr=0.02,
        sup_epochs=50,
        sup_early_stop=12,
        sup_batch_size=64,
        sup_plateau_patience=6,
        inc_batch_size=32,
        prednet_epochs=150,
        prednet_batch_size=32,
        proj_hidden_dim=64,
        proj_dim=32,
    )
    return replace(cfg, **overrides)


@dataclass
class DatasetConfig:
    kind: str = "blobs"  # blobs | idx
    # blobs; seed None derives the blob seed from the run seed
    classes: int = 18
    dim: int = 16
    train_per_class: int = 40
    test_per_class: int = 20
    separation: float = 8.0
    seed: int | None = None
    # idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.kind not in ("blobs", "idx"):
            raise ArgumentError(f"dataset kind must be 'blobs' or 'idx', got {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        return _from_mapping(cls, data)


@dataclass
class SplitConfig:
    base_classes: int = 10
    ways: int = 2
    shots: int = 5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SplitConfig":
        return _from_mapping(cls, data)


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    metric: str = "auto"  # auto | mahalanobis | euclidean; auto = euclidean iff shots == 1

    def __post_init__(self):
        if self.metric not in ("auto", "mahalanobis", "euclidean"):
            raise ArgumentError(f"metric must be auto/mahalanobis/euclidean, got {self.metric!r}")

    def resolved_metric(self) -> str:
        if self.metric != "auto":
            return self.metric
        return "euclidean" if self.split.shots == 1 else "mahalanobis"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "dataset": self.dataset.to_dict(),
            "split": self.split.to_dict(),
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"model", "training", "dataset", "split", "metric"}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(
            model=BackboneConfig.from_dict(data.get("model", {})),
            training=TrainingConfig.from_dict(data.get("training", {})),
            dataset=DatasetConfig.from_dict(data.get("dataset", {})),
            split=SplitConfig.from_dict(data.get("split", {})),
            metric=data.get("metric", "auto"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def toy_fscil_config() -> RunConfig:
    """Synthetic-blob protocol: 10 base classes + 4 sessions of 2-way 5-shot."""
    return RunConfig(
        model=BackboneConfig(
            image_size=4,
            in_channels=1,
            conv_channels=(32,),
            conv_kernel=3,
            conv_stride=1,
            conv_padding=1,
            pool_size=2,
            pool_stride=2,
            embed_dim=32,
            layers=2,
            heads=2,
            ffn_hidden=64,
        ),
        training=desk_profile(prefix_len=8, inc_epochs=15, inc_epochs_base=4),
        dataset=DatasetConfig(kind="blobs", classes=18, dim=16, train_per_class=40, test_per_class=20, separation=8.0),
        split=SplitConfig(base_classes=10, ways=2, shots=5),
    )
