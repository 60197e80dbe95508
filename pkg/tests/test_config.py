import pytest
import yaml

from ssba.config import ExperimentConfig, apply_overrides, preset
from ssba.core import ConfigurationError


def test_defaults_validate():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.dataset.name == "mnist"
    assert cfg.attack.poison_fraction == cfg.attack.cover_fraction == 0.05
    assert cfg.image_shape == (28, 28, 1) and cfg.num_classes == 10


def test_yaml_load_with_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"dataset": {"name": "cifar10"}, "attack": {"kind": "cassock1"}}))
    cfg = ExperimentConfig.load(path, ["train.epochs=3", "attack.source_classes=[2, 3]", "seed=7"])
    assert cfg.train.epochs == 3 and cfg.attack.source_classes == [2, 3] and cfg.seed == 7
    assert cfg.attack.kind == "cassock1"


def test_dump_roundtrip(tmp_path):
    cfg = preset("cifar10", attack={"kind": "cassock2"})
    cfg.dump(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.config_hash() == cfg.config_hash()


@pytest.mark.parametrize("data", [
    {"dataset": {"name": "imagenet"}},
    {"model": {"arch": "vgg"}},
    {"attack": {"kind": "blend"}},
    {"attack": {"target_class": 10}},
    {"attack": {"source_classes": [1], "target_class": 1}},
    {"attack": {"poison_fraction": 0}},
    {"train": {"epochs": "five"}},
    {"train": {"lr": True}},
    {"evaluation": {"sizes": [0, 10, 10]}},
    {"colour": "blue"},
    {"attack": {"trigger": {"shape": "round"}}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_override_syntax_errors():
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["train.epochs"])
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["train..epochs=1"])
    with pytest.raises(ConfigurationError):
        apply_overrides({"seed": 1}, ["seed.x=1"])


def test_hash_scopes():
    a = preset("mnist")
    b = a.with_overrides(["evaluation.sizes=[10, 10, 10]"])
    c = a.with_overrides(["defences.scan.threshold=4.0"])
    d = a.with_overrides(["train.epochs=2"])
    assert a.config_hash("run") == b.config_hash("run") == c.config_hash("run")
    assert a.config_hash("evaluate") != b.config_hash("evaluate")
    assert a.config_hash("evaluate") == c.config_hash("evaluate")
    assert a.config_hash() != c.config_hash()
    assert a.config_hash("run") != d.config_hash("run")
    assert a.schema_hash() == d.schema_hash()
    with pytest.raises(ValueError):
        a.config_hash("bogus")


def test_objective_auto():
    assert preset("mnist", attack={"kind": "cassock2"}).objective() == "Lc"
    assert preset("mnist", attack={"kind": "cassock1"}).objective() == "Lp"
    assert preset("mnist", train={"objective": "Lc"}).objective() == "Lc"


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("svhn")
