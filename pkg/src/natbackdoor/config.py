"""Experiment configuration: a YAML document mapped onto nested dataclasses.

Unknown keys are rejected at every level and all cross-field constraints are checked
before any data is loaded or any model is trained.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError
from .trigger import NORM_TYPES
from .zoo import FAMILIES


@dataclass
class DatasetConfig:
    name: str = "digits"
    classes: Optional[list] = None
    root: Optional[str] = None
    image_size: int = 16
    val_fraction: float = 0.15
    test_fraction: float = 0.2
    max_train: Optional[int] = None
    num_classes: int = 2  # blobs only
    n: int = 400  # blobs only

    def loader_kwargs(self):
        kw = {"classes": self.classes, "val_fraction": self.val_fraction,
              "test_fraction": self.test_fraction, "root": self.root, "max_train": self.max_train}
        if self.name == "digits":
            kw["image_size"] = self.image_size
        if self.name == "blobs":
            kw.pop("classes")
            kw.update(n=self.n, num_classes=self.num_classes)
        return kw

    @property
    def k(self) -> int:
        if self.name == "blobs":
            return self.num_classes
        return len(self.classes) if self.classes else 10


@dataclass
class SplitConfig:
    mode: str = "none"  # none | overlap | dirichlet
    attacker_range: list = field(default_factory=lambda: [0.0, 1.0])
    user_range: list = field(default_factory=lambda: [0.0, 1.0])
    alpha: float = 0.5


@dataclass
class ModelConfig:
    family: str = "small-resnet"
    width: int = 16
    depth: int = 2
    checkpoint: Optional[str] = None
    name: Optional[str] = None

    @property
    def model_id(self):
        if self.name:
            return self.name
        if self.checkpoint:
            return Path(self.checkpoint).stem
        return f"{self.family}-w{self.width}-d{self.depth}"


@dataclass
class TrainSection:
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 32


@dataclass
class DistillSection:
    temperature: float = 1.0
    alpha: float = 0.5
    scale_kl_by_h2: bool = False
    train: TrainSection = field(default_factory=TrainSection)


@dataclass
class ScheduleSection:
    max_epochs: int = 10
    iters_per_epoch: Optional[int] = None
    inner_steps: int = 1
    trigger_lr: float = 0.1
    batch_size: int = 32
    joint: bool = False
    keep_passing: bool = True


@dataclass
class LambdaSection:
    initial: float = 1e-4
    target_asr: float = 0.99
    up_factor: float = 1.5
    down_factor: float = 1.5
    patience: int = 5


@dataclass
class UapSection:
    enabled: bool = False
    epsilon: float = 0.1
    steps: int = 10
    step_size: float = 0.01


@dataclass
class AttackSection:
    target_class: int = 0
    norm_type: str = "L1"
    transparency_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    multi_targets: list = field(default_factory=list)
    uap: UapSection = field(default_factory=UapSection)


@dataclass
class PruneSection:
    enabled: bool = False
    method: str = "magnitude"
    ratios: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])


@dataclass
class FineTuneSection:
    enabled: bool = False
    clean_fraction: float = 0.10
    epochs: int = 5
    learning_rate: float = 0.01


@dataclass
class NadSection:
    enabled: bool = False
    clean_fraction: float = 0.10
    beta: float = 500.0
    epochs: int = 5
    learning_rate: float = 0.01


@dataclass
class StripSection:
    enabled: bool = False
    n_overlays: int = 64


@dataclass
class BeatrixSection:
    enabled: bool = False
    gram_orders: list = field(default_factory=lambda: list(range(1, 10)))
    eta: float = 1.4826
    tap_layer: int = -1


@dataclass
class DefenseSection:
    prune: PruneSection = field(default_factory=PruneSection)
    fine_tune: FineTuneSection = field(default_factory=FineTuneSection)
    nad: NadSection = field(default_factory=NadSection)
    strip: StripSection = field(default_factory=StripSection)
    beatrix: BeatrixSection = field(default_factory=BeatrixSection)

    def any_enabled(self):
        return any(getattr(self, f.name).enabled for f in dataclasses.fields(self))


@dataclass
class ChecksSection:
    min_ensemble_asr: Optional[float] = None
    min_target_asr: Optional[float] = None
    beat_baseline: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    substitutes: list = field(default_factory=lambda: [ModelConfig("small-resnet"), ModelConfig("small-vgg"),
                                                       ModelConfig("small-mobilenet")])
    targets: list = field(default_factory=lambda: [ModelConfig("small-shufflenet")])
    target_training: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    lambda_: LambdaSection = field(default_factory=LambdaSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defenses: DefenseSection = field(default_factory=DefenseSection)
    checks: ChecksSection = field(default_factory=ChecksSection)

    def validate(self) -> "ExperimentConfig":
        k = self.dataset.k
        if self.dataset.name not in ("digits", "blobs", "cifar10"):
            raise ConfigurationError(f"dataset.name: unknown dataset {self.dataset.name!r}")
        if k < 2:
            raise ConfigurationError("dataset must have at least two classes")
        targets = [self.attack.target_class, *self.attack.multi_targets]
        for t in targets:
            if not 0 <= int(t) < k:
                raise ConfigurationError(f"attack target class {t} outside [0, {k})")
        if len(set(self.attack.multi_targets)) != len(self.attack.multi_targets):
            raise ConfigurationError("attack.multi_targets must be distinct")
        if self.attack.norm_type not in NORM_TYPES:
            raise ConfigurationError(f"attack.norm_type must be one of {NORM_TYPES}")
        if any(not 0 <= t <= 1 for t in self.attack.transparency_grid):
            raise ConfigurationError("transparency grid values must lie in [0, 1]")
        if not self.substitutes:
            raise ConfigurationError("at least one substitute is required")
        for m in [*self.substitutes, *self.targets]:
            if m.checkpoint is None and m.family not in FAMILIES:
                raise ConfigurationError(f"unknown model family {m.family!r}")
        if any(m.checkpoint for m in self.substitutes):
            raise ConfigurationError("substitutes are trained by the pipeline; checkpoints are for targets only")
        ids = [m.model_id for m in self.targets]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"target model ids must be unique: {ids}")
        if self.split.mode not in ("none", "overlap", "dirichlet"):
            raise ConfigurationError(f"split.mode must be none, overlap or dirichlet")
        if self.schedule.batch_size < 1 or self.schedule.max_epochs < 0:
            raise ConfigurationError("schedule.batch_size >= 1 and schedule.max_epochs >= 0 required")
        if self.defenses.prune.method not in ("magnitude", "activation"):
            raise ConfigurationError("defenses.prune.method must be magnitude or activation")
        if any(not 0 <= r < 1 for r in self.defenses.prune.ratios):
            raise ConfigurationError("pruning ratios must lie in [0, 1)")
        if self.attack.uap.enabled and self.attack.uap.step_size > self.attack.uap.epsilon:
            raise ConfigurationError("attack.uap.step_size must not exceed epsilon")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_RENAMES = {"lambda": "lambda_"}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            key = next((k for k, v in _RENAMES.items() if v == f.name), f.name)
            out[key] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_LIST_OF = {("ExperimentConfig", "substitutes"): ModelConfig, ("ExperimentConfig", "targets"): ModelConfig}


def _build(cls, data, path="config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _RENAMES.get(key, key)
        if name not in fields:
            raise ConfigurationError(f"{path}: unknown key {key!r}")
        f = fields[name]
        sub = f"{path}.{key}"
        item_cls = _LIST_OF.get((cls.__name__, name))
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if item_cls is not None:
            if not isinstance(value, list):
                raise ConfigurationError(f"{sub}: expected a list")
            kwargs[name] = [_build(item_cls, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{path}: expected a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigurationError(f"{path}: expected a list")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data or {})


def parse_config(text: str) -> ExperimentConfig:
    return config_from_dict(yaml.safe_load(text) or {})
