"""Declarative experiment configuration: YAML file + dotted-key overrides, validated up front."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .core import ATTACK_KINDS, ConfigurationError, stable_hash
from .datasets import DATASETS
from .models import ARCHITECTURES

SCHEMA_VERSION = 1
RUN_KINDS = ATTACK_KINDS + ("none",)
DATASET_META = {
    "mnist": ((28, 28, 1), 10),
    "cifar10": ((32, 32, 3), 10),
    "gtsrb": ((48, 48, 3), 43),
    "synthetic": ((12, 12, 1), 4),
}


@dataclass
class DatasetConfig:
    name: str = "mnist"
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    root: Optional[str] = None


@dataclass
class ModelConfig:
    arch: str = "mnist_cnn"
    width: int = 16


@dataclass
class PatchConfig:
    area_fraction: float = 0.02
    corner: str = "bottom_right"
    pattern: str = "white"


@dataclass
class FeatureConfig:
    donors: int = 10
    confidence_floor: float = 0.9
    lam: float = 1e-3
    noise_sigma: float = 0.1
    steps: int = 500
    lr: float = 0.1
    surrogate: Optional[str] = None


@dataclass
class MixerSection:
    kind: str = "half_concat"
    orientation: str = "vertical"
    corner: str = "bottom_right"
    quantile: float = 0.9
    min_overlap: float = 0.25


@dataclass
class AttackConfig:
    kind: str = "baseline"
    source_classes: list = field(default_factory=lambda: [0])
    num_source_classes: Optional[int] = None
    target_class: int = 1
    num_backdoors: int = 1
    poison_fraction: float = 0.05
    cover_fraction: float = 0.05
    alpha_train: float = 0.5
    trigger: PatchConfig = field(default_factory=PatchConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    mixer: MixerSection = field(default_factory=MixerSection)


@dataclass
class TrainSection:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    gamma: float = 0.1
    margin: float = 1.0
    objective: str = "auto"


@dataclass
class EvaluationConfig:
    sizes: list = field(default_factory=lambda: [500, 500, 1000])


@dataclass
class NeuralCleanseConfig:
    enabled: bool = True
    steps: int = 100
    lam: float = 1e-2
    lr: float = 0.1
    n_samples: int = 20
    threshold: float = 2.0


@dataclass
class ScanConfig:
    enabled: bool = True
    n_components: int = 10
    threshold: float = 3.0
    min_class_size: int = 20


@dataclass
class FebruusConfig:
    enabled: bool = True
    threshold: float = 0.8
    n_inputs: int = 200


@dataclass
class DefenceConfig:
    neural_cleanse: NeuralCleanseConfig = field(default_factory=NeuralCleanseConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    februus: FebruusConfig = field(default_factory=FebruusConfig)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    defences: DefenceConfig = field(default_factory=DefenceConfig)
    output_dir: str = "runs"
    seed: int = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data):
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        return cls.from_dict(apply_overrides(data, overrides))

    def to_dict(self):
        return dataclasses.asdict(self)

    def with_overrides(self, overrides):
        return ExperimentConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    # -- identity ---------------------------------------------------------

    def config_hash(self, scope="full"):
        """Hash of the config. ``scope="run"`` covers only what crafting and training depend on."""
        d = self.to_dict()
        d.pop("output_dir")
        if scope == "run":
            d.pop("evaluation")
            d.pop("defences")
        elif scope == "evaluate":
            d.pop("defences")
        elif scope != "full":
            raise ValueError(f"unknown hash scope {scope!r}")
        return stable_hash(d, length=32)

    def schema_hash(self):
        return stable_hash({"version": SCHEMA_VERSION, "keys": sorted(_dotted_keys(self.to_dict()))})

    # -- derived values ---------------------------------------------------

    @property
    def image_shape(self):
        return DATASET_META[self.dataset.name][0]

    @property
    def num_classes(self):
        return DATASET_META[self.dataset.name][1]

    def objective(self):
        if self.train.objective != "auto":
            return self.train.objective
        return "Lc" if self.attack.kind == "cassock2" else "Lp"

    def validate(self):
        d, m, a, t = self.dataset, self.model, self.attack, self.train
        if d.name not in DATASETS:
            raise ConfigurationError(f"unknown dataset id {d.name!r}; expected one of {DATASETS}")
        if m.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown model id {m.arch!r}; expected one of {ARCHITECTURES}")
        if m.width < 1:
            raise ConfigurationError("model.width must be positive")
        n = self.num_classes
        if a.kind not in RUN_KINDS:
            raise ConfigurationError(f"unknown attack kind {a.kind!r}; expected one of {RUN_KINDS}")
        if not 0 <= a.target_class < n:
            raise ConfigurationError(f"target class {a.target_class} outside [0, {n})")
        if a.num_source_classes is not None and not 1 <= a.num_source_classes < n:
            raise ConfigurationError(f"num_source_classes must be in [1, {n - 1}]")
        bad = [c for c in a.source_classes if not 0 <= int(c) < n]
        if bad:
            raise ConfigurationError(f"source classes {bad} outside [0, {n})")
        if a.num_source_classes is None and a.target_class in a.source_classes:
            raise ConfigurationError("target class cannot also be a source class")
        if not 1 <= a.num_backdoors < n:
            raise ConfigurationError(f"num_backdoors must be in [1, {n - 1}]")
        for name in ("poison_fraction", "cover_fraction"):
            v = getattr(a, name)
            if not 0.0 < v <= 1.0:
                raise ConfigurationError(f"attack.{name} must be in (0, 1], got {v}")
        if not 0.0 <= a.alpha_train <= 1.0:
            raise ConfigurationError("attack.alpha_train must be in [0, 1]")
        if not 0.0 < a.trigger.area_fraction < 1.0:
            raise ConfigurationError("attack.trigger.area_fraction must be in (0, 1)")
        if a.mixer.kind not in ("half_concat", "crop_and_paste"):
            raise ConfigurationError(f"unknown mixer kind {a.mixer.kind!r}")
        if t.epochs < 0 or t.batch_size < 1 or t.lr <= 0:
            raise ConfigurationError("train.epochs >= 0, train.batch_size >= 1 and train.lr > 0 are required")
        if t.objective not in ("auto", "Lp", "Lc"):
            raise ConfigurationError(f"train.objective must be auto, Lp or Lc, got {t.objective!r}")
        if t.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr_schedule {t.lr_schedule!r}")
        sizes = self.evaluation.sizes
        if len(sizes) != 3 or any(int(s) < 0 for s in sizes) or int(sizes[0]) == 0 or int(sizes[2]) == 0:
            raise ConfigurationError("evaluation.sizes must be [n_poisoned > 0, n_cover >= 0, n_clean > 0]")
        if not 0.0 < self.defences.februus.threshold <= 1.0:
            raise ConfigurationError("defences.februus.threshold must be in (0, 1]")
        return self


def _dotted_keys(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _dotted_keys(v, key + ".")
        else:
            yield key


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown config keys {[where + k for k in unknown]}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{where}{name}")
    return cls(**kwargs)


def _coerce(value, default, key):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigurationError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{key} expects a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigurationError(f"{key} expects a list, got {value!r}")
    return value


def apply_overrides(data, overrides):
    """Apply ``key.sub=value`` strings (values parsed as YAML scalars) to a nested dict copy."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigurationError(f"malformed override key {key!r}")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-section")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse override value {raw!r}: {exc}") from exc
    return data


PRESETS = {
    "mnist": {
        "dataset": {"name": "mnist"},
        "model": {"arch": "mnist_cnn", "width": 16},
        "train": {"epochs": 5, "batch_size": 64, "lr": 0.01},
        "attack": {"mixer": {"kind": "half_concat"}},
    },
    "cifar10": {
        "dataset": {"name": "cifar10"},
        "model": {"arch": "cifar_cnn", "width": 8},
        "train": {"epochs": 30, "batch_size": 64, "lr": 0.01, "lr_schedule": "cosine", "weight_decay": 5e-4},
        "attack": {"mixer": {"kind": "crop_and_paste"}},
    },
    "synthetic": {
        "dataset": {"name": "synthetic"},
        "model": {"arch": "mnist_cnn", "width": 8},
        "train": {"epochs": 5, "batch_size": 64, "lr": 0.05},
        "attack": {"trigger": {"area_fraction": 0.04}, "feature": {"steps": 200}},
        "evaluation": {"sizes": [100, 100, 200]},
    },
}


def preset(name, **sections):
    """Desk-scale preset for a dataset, merged with optional section overrides."""
    if name not in PRESETS:
        raise ConfigurationError(f"no preset for {name!r}; available: {sorted(PRESETS)}")
    data = copy.deepcopy(PRESETS[name])
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {})
            _deep_update(data[key], value)
        else:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def _deep_update(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
