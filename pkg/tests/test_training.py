import numpy as np
import pytest
import torch
from conftest import random_dataset

from ssba.core import ConfigurationError, LabeledDataset, TrainingError
from ssba.evaluation import rate
from ssba.models import ModelSpec, trainable_layers
from ssba.training import (
    BackdoorClassifier,
    TrainConfig,
    fine_tune,
    pairwise_contrastive_loss,
    parameter_checksum,
    train_backdoor,
    train_clean,
)


def _sim_numpy(z, labels, margin):
    """Reference SIM in float64 numpy (normalised embeddings, mean over pairs)."""
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    vals = []
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            d2 = np.sum((z[i] - z[j]) ** 2)
            if labels[i] == labels[j]:
                vals.append(d2)
            else:
                vals.append(max(0.0, margin - np.sqrt(d2)) ** 2)
    return float(np.mean(vals))


def test_contrastive_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(4, 5))
    labels = np.array([0, 0, 1, 1])
    margin = 1.5  # keeps the different-label pairs inside the hinge
    zt = torch.tensor(z0, dtype=torch.float64, requires_grad=True)
    loss = pairwise_contrastive_loss(zt, torch.tensor(labels), margin=margin, eps=0.0)
    assert abs(float(loss.detach()) - _sim_numpy(z0, labels, margin)) < 1e-10
    (grad,) = torch.autograd.grad(loss, zt)
    h = 1e-6
    num = np.zeros_like(z0)
    for idx in np.ndindex(z0.shape):
        zp, zm = z0.copy(), z0.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (_sim_numpy(zp, labels, margin) - _sim_numpy(zm, labels, margin)) / (2 * h)
    rel = np.linalg.norm(grad.numpy() - num) / np.linalg.norm(num)
    assert rel < 1e-3


def test_contrastive_loss_direction():
    z = torch.tensor([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    same = pairwise_contrastive_loss(z, torch.tensor([0, 0, 0]))
    split = pairwise_contrastive_loss(z, torch.tensor([0, 0, 1]))
    assert split < same
    assert float(pairwise_contrastive_loss(z[:1], torch.tensor([0]))) == 0.0


def test_probability_rows(clean_model, syn_test):
    p = clean_model.predict_proba(syn_test.X)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(p.argmax(1), clean_model.predict(syn_test.X))


def test_clean_training_learns_synthetic_task(clean_model, syn_test):
    assert rate(clean_model.predict(syn_test.X), syn_test.y) > 0.9
    hist = clean_model.loss_history_
    assert hist[-1] < hist[0]


def test_zero_epochs_is_chance_level(syn_train, syn_test, syn_spec):
    clf = train_clean(syn_train, syn_spec, TrainConfig(epochs=0))
    acc = rate(clf.predict(syn_test.X), syn_test.y)
    assert abs(acc - 0.25) <= 0.15
    assert np.allclose(clf.predict_proba(syn_test.X[:20]).sum(1), 1.0, atol=1e-6)


def test_training_is_deterministic(syn_train, syn_test, syn_spec):
    cfg = TrainConfig(epochs=1, lr=0.05, seed=3)
    a = train_clean(syn_train, syn_spec, cfg)
    b = train_clean(syn_train, syn_spec, cfg)
    assert round(rate(a.predict(syn_test.X), syn_test.y), 4) == round(rate(b.predict(syn_test.X), syn_test.y), 4)
    assert parameter_checksum(a.model_) == parameter_checksum(b.model_)


def test_gamma_zero_lc_equals_lp(baseline_attack, syn_spec):
    _, merged, manifest, _ = baseline_attack
    cfg = TrainConfig(epochs=1, lr=0.05, gamma=0.0, seed=1)
    lp = train_backdoor(merged, manifest, syn_spec, cfg, objective="Lp")
    lc = train_backdoor(merged, manifest, syn_spec, cfg, objective="Lc")
    assert np.allclose(lp.batch_losses_, lc.batch_losses_, rtol=1e-5, atol=1e-6)
    assert lc.contrastive_classes == [0, 1]
    assert any(v > 0 for v in lc.sim_history_)


def test_lc_changes_loss_when_gamma_positive(baseline_attack, syn_spec):
    _, merged, manifest, _ = baseline_attack
    lc = train_backdoor(merged, manifest, syn_spec, TrainConfig(epochs=1, lr=0.05, gamma=0.5, seed=1),
                        objective="Lc")
    lp = train_backdoor(merged, manifest, syn_spec, TrainConfig(epochs=1, lr=0.05, seed=1), objective="Lp")
    assert not np.allclose(lp.batch_losses_, lc.batch_losses_)


def test_lc_without_source_or_target_records():
    ds = random_dataset(40, 4, (12, 12, 1))
    keep = ds.y >= 2
    sub = LabeledDataset(ds.X[keep], ds.y[keep], 4)
    clf = BackdoorClassifier(width=8, epochs=1, objective="Lc", contrastive_classes=[0, 1], num_classes=4)
    with pytest.raises(ConfigurationError):
        clf.fit(sub.X, sub.y)
    with pytest.raises(ConfigurationError):
        BackdoorClassifier(objective="Lx").fit(sub.X, sub.y)


def test_divergence_reports_epoch():
    ds = random_dataset(64, 4, (12, 12, 1))
    clf = BackdoorClassifier(width=8, epochs=3, lr=1e30, momentum=0.0, num_classes=4)
    with pytest.raises(TrainingError) as info:
        clf.fit(ds.X, ds.y)
    assert info.value.epoch is not None and info.value.epoch <= 2


def test_shape_mismatch_is_configuration_error(syn_train):
    with pytest.raises(ConfigurationError):
        train_clean(syn_train, ModelSpec("mnist_cnn", (28, 28, 1), 4), TrainConfig(epochs=0))
    with pytest.raises(ConfigurationError):
        TrainConfig(gamma=-1)


def test_manifest_alignment_checked(baseline_attack, syn_spec, syn_cfg):
    _, merged, manifest, _ = baseline_attack
    with pytest.raises(ConfigurationError):
        train_backdoor(merged.subset(np.arange(10)), manifest, syn_spec, syn_cfg)


def test_fine_tune_zero_epochs_is_identity(clean_model, syn_test):
    tuned = fine_tune(clean_model, syn_test.X, syn_test.y, layers_to_tune=2, epochs=0)
    assert parameter_checksum(tuned.model_) == parameter_checksum(clean_model.model_)
    assert tuned is not clean_model


def test_fine_tune_freezes_leading_layers(clean_model, syn_test):
    before = parameter_checksum(clean_model.model_)
    # the synthetic task is separable to zero loss, so relabel to force nonzero gradients
    tuned = fine_tune(clean_model, syn_test.X, (syn_test.y + 1) % 4, layers_to_tune=2, epochs=1, lr=0.05)
    after = parameter_checksum(tuned.model_)
    layers = trainable_layers(tuned.model_)
    names = {id(m): n for n, m in tuned.model_.named_modules()}
    tuned_names = {names[id(m)] for m in layers[-2:]}
    changed = {k for k in before if before[k] != after[k]}
    assert changed
    assert all(any(k.startswith(n + ".") for n in tuned_names) for k in changed)
    # the input handle is left alone
    assert parameter_checksum(clean_model.model_) == before


def test_fine_tune_depth_check(clean_model, syn_test):
    depth = len(trainable_layers(clean_model.model_))
    with pytest.raises(ConfigurationError):
        fine_tune(clean_model, syn_test.X, syn_test.y, layers_to_tune=depth + 1, epochs=1)
    with pytest.raises(ConfigurationError):
        fine_tune(clean_model, syn_test.X, syn_test.y, layers_to_tune=0, epochs=1)


def test_checkpoint_roundtrip(tmp_path, clean_model, syn_test):
    clean_model.save(tmp_path / "m.pt", note="x")
    back = BackdoorClassifier.load(tmp_path / "m.pt")
    assert np.allclose(back.predict_proba(syn_test.X[:50]), clean_model.predict_proba(syn_test.X[:50]))
    assert back.checkpoint_metadata_["note"] == "x"
    assert back.get_params()["arch"] == "mnist_cnn"


@pytest.mark.parametrize("arch,shape", [("cifar_cnn", (32, 32, 3)), ("resnet20", (32, 32, 3)),
                                        ("mnist_cnn", (28, 28, 1))])
def test_architectures_forward(arch, shape):
    ds = random_dataset(8, 10, shape)
    clf = BackdoorClassifier(arch=arch, width=4, epochs=0, num_classes=10).fit(ds.X, ds.y)
    assert clf.predict_proba(ds.X).shape == (8, 10)
    assert clf.embed(ds.X).shape[0] == 8
    torch.manual_seed(0)
