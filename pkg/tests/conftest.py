import numpy as np
import pytest
import torch
from hypothesis import settings

from ssba.core import AttackSpec, ClassPartition, LabeledDataset
from ssba.datasets import make_synthetic
from ssba.models import ModelSpec
from ssba.poisoning import craft
from ssba.training import TrainConfig, train_backdoor, train_clean
from ssba.triggers import make_patch_trigger

torch.set_num_threads(1)
settings.register_profile("ssba", max_examples=60, deadline=None)
settings.load_profile("ssba")

SYN_SHAPE = (12, 12, 1)


@pytest.fixture(scope="session")
def syn_train():
    return make_synthetic(2000, num_classes=4, image_shape=SYN_SHAPE, seed=0)


@pytest.fixture(scope="session")
def syn_test():
    return make_synthetic(800, num_classes=4, image_shape=SYN_SHAPE, seed=1)


@pytest.fixture(scope="session")
def syn_spec():
    return ModelSpec("mnist_cnn", SYN_SHAPE, 4, width=8)


@pytest.fixture(scope="session")
def syn_cfg():
    return TrainConfig(epochs=5, batch_size=64, lr=0.05, seed=0)


@pytest.fixture(scope="session")
def clean_model(syn_train, syn_spec, syn_cfg):
    return train_clean(syn_train, syn_spec, syn_cfg)


@pytest.fixture(scope="session")
def syn_trigger():
    return make_patch_trigger(SYN_SHAPE, area_fraction=0.04, seed=0)


@pytest.fixture(scope="session")
def baseline_attack(syn_train, syn_spec, syn_cfg, syn_trigger):
    spec = AttackSpec("baseline", ClassPartition([0], 1), 0.1, 0.1, trigger=syn_trigger, seed=0)
    merged, manifest = craft(syn_train, spec)
    model = train_backdoor(merged, manifest, syn_spec, syn_cfg)
    return spec, merged, manifest, model


def random_dataset(n=200, num_classes=10, shape=(8, 8, 1), seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n,) + shape).astype(np.float32)
    y = np.arange(n) % num_classes
    return LabeledDataset(X, y, num_classes)
