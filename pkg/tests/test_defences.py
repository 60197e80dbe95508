import copy

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import median_abs_deviation

from ssba.defences import (
    ExtendedNeuralCleanse,
    FebruusPurifier,
    ScanStyleDetector,
    anomaly_indices,
    diffusion_inpaint,
    extended_neural_cleanse,
    februus_style_purify,
    pair_anomaly_scores,
    grad_cam,
    scan_style_detect,
)
from ssba import pipeline
from ssba.datasets import make_synthetic
from ssba.models import ModelSpec
from ssba.training import BackdoorClassifier, TrainConfig, train_clean
from ssba.benchmarks import datasets_available, mnist_config

# ---------------------------------------------------------------------------
# anomaly index
# ---------------------------------------------------------------------------


def test_mad_worked_example():
    idx = anomaly_indices([8, 10, 12, 1])
    assert idx[3] == pytest.approx(9 / (1.4826 * 2), rel=1e-9)
    assert idx[3] == pytest.approx(3.04, abs=5e-3)
    assert idx[3] > 2.0
    assert np.all(idx[:3] < 2.0)


@given(st.lists(st.floats(0.0, 100.0, allow_nan=False), min_size=3, max_size=12))
def test_mad_matches_scipy_oracle(norms):
    got = anomaly_indices(norms)
    v = np.array(norms)
    for i in range(len(v)):
        others = np.delete(v, i)
        scale = median_abs_deviation(others, scale="normal")
        dev = np.median(others) - v[i]
        if scale == 0:
            assert got[i] == (np.inf if dev > 0 else 0.0)
        else:
            # scipy's normal scale is 1/Phi^-1(3/4) = 1.482602..., 1.4826 differs by < 2e-6 relative
            assert got[i] == pytest.approx(dev / scale, rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------------------
# extended Neural Cleanse (cheap structural checks; detection rates are covered elsewhere)
# ---------------------------------------------------------------------------


class _BoxProbe(ExtendedNeuralCleanse):
    """Records the min/max of the effective mask at every optimiser step."""

    def _reverse_source(self, module, x, source, targets, gen):
        self.trace_ = getattr(self, "trace_", [])
        orig_step = torch.optim.Adam.step
        trace = self.trace_

        def step(opt, *a, **kw):
            out = orig_step(opt, *a, **kw)
            raw = opt.param_groups[0]["params"][0]
            m = (torch.tanh(raw.detach()) + 1) / 2
            trace.append((float(m.min()), float(m.max())))
            return out

        torch.optim.Adam.step = step
        try:
            return super()._reverse_source(module, x, source, targets, gen)
        finally:
            torch.optim.Adam.step = orig_step


def test_nc_masks_obey_box_every_step(syn_test):
    untrained = BackdoorClassifier(width=4, epochs=0, num_classes=4).fit(syn_test.X[:8], syn_test.y[:8])
    nc = _BoxProbe(steps=15, n_samples=5, lr=1.0).fit(untrained, syn_test.X, syn_test.y)
    assert len(nc.trace_) == 15 * 4
    assert all(0.0 <= lo and hi <= 1.0 for lo, hi in nc.trace_)
    assert nc.box_violations_ == 0
    assert len(nc.triggers_) == 4 * 3
    for rt in nc.triggers_.values():
        assert rt.mask.min() >= 0 and rt.mask.max() <= 1 and rt.norm >= 0


def test_nc_verdict_structure(clean_model, syn_test):
    verdict = extended_neural_cleanse(clean_model, syn_test, steps=10, n_samples=5)
    assert set(verdict.flagged) <= set(verdict.scores)
    d = verdict.to_dict()
    assert set(d["norms"]) == {f"{a}->{b}" for a in range(4) for b in range(4) if a != b}
    assert d["infected"] == bool(d["flagged"])


def test_nc_requires_every_class(clean_model, syn_test):
    keep = syn_test.y != 2
    with pytest.raises(ValueError):
        ExtendedNeuralCleanse(steps=1).fit(clean_model, syn_test.X[keep], syn_test.y[keep])


def test_nc_reverses_planted_trigger(baseline_attack, syn_test):
    """On the infected synthetic model the 0->1 trigger is the cheapest way into class 1."""
    _, _, _, model = baseline_attack
    nc = ExtendedNeuralCleanse(seed=0).fit(model, syn_test.X, syn_test.y)
    into_target = {a: nc.norms_[(a, 1)] for a in (0, 2, 3)}
    assert min(into_target, key=into_target.get) == 0
    assert nc.triggers_[(0, 1)].flip_rate >= 0.9


def _effects_matrix(n=8, planted=(2, 5), seed=0):
    """Norms with multiplicative per-source and per-target effects, one pair shrunk 4x."""
    rng = np.random.default_rng(seed)
    row = np.exp(rng.normal(scale=0.6, size=n))
    col = np.exp(rng.normal(scale=0.6, size=n))
    norms = {(a, b): 30.0 * row[a] * col[b] * np.exp(rng.normal(scale=0.2))
             for a in range(n) for b in range(n) if a != b}
    norms[planted] /= 4.0
    return norms


@pytest.mark.parametrize("seed", range(5))
def test_two_way_grouping_ranks_planted_pair_first(seed):
    norms = _effects_matrix(seed=seed)
    scores = pair_anomaly_scores(norms, 8, "two_way")
    assert max(scores, key=scores.get) == (2, 5)
    assert len(scores) == 56


def test_one_way_groupings_match_plain_index():
    norms = _effects_matrix()
    by_target = pair_anomaly_scores(norms, 8, "target")
    col = [(a, 5) for a in range(8) if a != 5]
    assert np.allclose([by_target[p] for p in col], anomaly_indices([norms[p] for p in col]))
    by_source = pair_anomaly_scores(norms, 8, "source")
    row = [(2, b) for b in range(8) if b != 2]
    assert np.allclose([by_source[p] for p in row], anomaly_indices([norms[p] for p in row]))
    everything = pair_anomaly_scores(norms, 8, "global")
    assert np.allclose([everything[p] for p in norms], anomaly_indices(list(norms.values())))
    with pytest.raises(ValueError):
        pair_anomaly_scores(norms, 8, "diagonal")
    with pytest.raises(ValueError):
        ExtendedNeuralCleanse(grouping="diagonal").fit(None, np.zeros((1, 2, 2, 1)), [0])


def test_nc_clean_tiny_models_not_infected():
    """Control: freshly trained clean 10-class models, default detector settings."""
    test = make_synthetic(2000, num_classes=10, image_shape=(12, 12, 1), seed=1)
    spec = ModelSpec("mnist_cnn", (12, 12, 1), 10, width=8)
    clean = 0
    for r in range(10):
        train = make_synthetic(4000, num_classes=10, image_shape=(12, 12, 1), seed=100 + r)
        model = train_clean(train, spec, TrainConfig(epochs=5, batch_size=64, lr=0.05, seed=r))
        clean += not ExtendedNeuralCleanse(seed=r).fit(model, test.X, test.y).infected_
    assert clean >= 8


# ---------------------------------------------------------------------------
# SCAn-style detector
# ---------------------------------------------------------------------------


def _clusters(n_classes=6, n=200, dim=16, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=8.0, size=(n_classes, dim))
    Z = np.concatenate([centres[c] + spread * rng.normal(size=(n, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n)
    return Z, y, centres


def test_scan_spherical_classes_not_flagged():
    Z, y, centres = _clusters(seed=1)
    rng = np.random.default_rng(2)
    Zc = np.concatenate([centres[c] + rng.normal(size=(60, 16)) for c in range(6)])
    yc = np.repeat(np.arange(6), 60)
    det = scan_style_detect(Z, y, Zc, yc, seed=0)
    assert det.flagged_classes_ == []
    assert det.suspect_indices_ == {}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scan_recovers_planted_minority(seed):
    Z, y, centres = _clusters(seed=seed)
    rng = np.random.default_rng(seed + 10)
    # plant 30 points of a far-away identity inside class 2
    planted = rng.choice(np.flatnonzero(y == 2), size=30, replace=False)
    Z[planted] = centres[2] + 12.0 + rng.normal(size=(30, 16))
    Zc = np.concatenate([centres[c] + rng.normal(size=(60, 16)) for c in range(6)])
    yc = np.repeat(np.arange(6), 60)
    det = ScanStyleDetector(seed=seed).fit(Z, y, Zc, yc)
    assert det.flagged_classes_ == [2]
    suspects = set(det.suspect_indices_[2].tolist())
    precision = len(suspects & set(planted.tolist())) / len(suspects)
    assert precision >= 0.9


def test_scan_skips_small_classes():
    Z, y, centres = _clusters(n_classes=4, n=100, seed=3)
    small = np.flatnonzero(y == 3)[:15]
    keep = np.concatenate([np.flatnonzero(y != 3), small])
    rng = np.random.default_rng(0)
    Zc = np.concatenate([centres[c] + rng.normal(size=(40, 16)) for c in range(4)])
    yc = np.repeat(np.arange(4), 40)
    det = ScanStyleDetector().fit(Z[keep], y[keep], Zc, yc)
    assert det.skipped_ == [3]
    assert 3 not in det.gain_


def test_scan_params_roundtrip():
    det = ScanStyleDetector(threshold=2.5)
    assert det.get_params()["threshold"] == 2.5


# ---------------------------------------------------------------------------
# Februus-style purifier
# ---------------------------------------------------------------------------


def test_inpaint_locality_and_constant_fill():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(3, 10, 10, 2)).astype(np.float32)
    holes = np.zeros((3, 10, 10), bool)
    holes[:, 3:6, 4:8] = True
    out = diffusion_inpaint(X, holes)
    assert np.array_equal(out[~holes], X[~holes])
    const = np.full((1, 6, 6, 1), 0.4, np.float32)
    h = np.zeros((1, 6, 6), bool)
    h[0, 2:4, 2:4] = True
    const[h] = 1.0
    assert np.allclose(diffusion_inpaint(const, h), 0.4, atol=1e-3)


def test_inpaint_is_harmonic_inside_holes():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(1, 12, 12, 1)).astype(np.float32)
    holes = np.zeros((1, 12, 12), bool)
    holes[0, 4:8, 4:8] = True
    out = diffusion_inpaint(X, holes, tol=1e-7, max_iter=20000)[0, ..., 0].astype(np.float64)
    for r in range(4, 8):
        for c in range(4, 8):
            nb = (out[r - 1, c] + out[r + 1, c] + out[r, c - 1] + out[r, c + 1]) / 4
            assert abs(out[r, c] - nb) < 1e-4


def test_purifier_only_touches_removed_region(baseline_attack, syn_test):
    _, _, _, model = baseline_attack
    pur = FebruusPurifier(model)
    X = syn_test.X[:50]
    out, pred, skipped = pur.purify(X)
    regions = pur.last_regions_
    assert regions.shape == X.shape[:3]
    assert np.array_equal(out[~regions], X[~regions])
    assert len(pred) == 50 and skipped.dtype == bool


def test_flat_saliency_is_skipped(clean_model, syn_test):
    flat = copy.deepcopy(clean_model)
    with torch.no_grad():
        for m in flat.model_.features.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()
    img = syn_test.X[0]
    out, pred, skipped = februus_style_purify(flat, img)
    assert skipped
    assert np.array_equal(out, img)
    assert pred == int(flat.predict(img[None])[0])


def test_clean_batch_predictions_mostly_unchanged(clean_model, syn_test):
    X, y = syn_test.X[:200], syn_test.y[:200]
    before = clean_model.predict(X)
    _, after, _ = FebruusPurifier(clean_model).purify(X)
    assert np.mean(after == before) >= 0.9


@pytest.fixture(scope="module")
def mnist_runs():
    if not datasets_available("mnist"):
        pytest.skip("MNIST not prepared (scripts/prepare_data.py)")
    out = {}
    for kind in ("none", "baseline"):
        cfg = mnist_config(kind)
        run, _ = pipeline.run_experiment(cfg)
        out[kind] = (cfg, run, pipeline.load_model(run))
    return out


def test_clean_mnist_batch_mostly_unchanged(mnist_runs):
    cfg, _, model = mnist_runs["none"]
    test = pipeline.load_split(cfg, "test")
    X = test.X[:500]
    _, after, _ = FebruusPurifier(model).purify(X)
    assert np.mean(after == model.predict(X)) >= 0.9


def test_saliency_lands_on_patch(mnist_runs):
    cfg, run, model = mnist_runs["baseline"]
    bd = pipeline.load_backdoors(cfg, run)[0]
    test = pipeline.load_split(cfg, "test")
    src = test.X[test.y == 0][:200]
    Xp = bd.stamp_inference(src, [0] * len(src))
    cam, _ = grad_cam(model.model_, Xp)
    rs, cs = bd.trigger.region()
    near = np.zeros(cam.shape[1:], bool)
    near[max(rs.start - 1, 0):rs.stop + 1, max(cs.start - 1, 0):cs.stop + 1] = True
    peaks = [np.unravel_index(np.argmax(c), c.shape) for c in cam]
    assert np.mean([near[p] for p in peaks]) > 0.5
    _, pred, _ = FebruusPurifier(model).purify(Xp)
    assert np.mean(pred == 0) > 0.5


def test_grad_cam_range(clean_model, syn_test):
    cam, cls = grad_cam(clean_model.model_, syn_test.X[:8])
    assert cam.shape == (8, 12, 12)
    assert cam.min() >= 0 and cam.max() <= 1
    assert np.array_equal(cls, clean_model.predict(syn_test.X[:8]))
