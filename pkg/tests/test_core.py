import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssba.core import (
    AttackSpec,
    ClassPartition,
    ConfigurationError,
    LabeledDataset,
    as_image,
    check_images,
    derive_seed,
    partition_indices,
    per_class_subsample,
    seeded_subsample,
)


def test_partition_example():
    src, non, tgt = partition_indices(np.array([0, 1, 9, 0]), ClassPartition([0], 9), 10)
    assert src.tolist() == [0, 3]
    assert non.tolist() == [1]
    assert tgt.tolist() == [2]


def test_partition_all_but_target_has_empty_non_source():
    y = np.arange(30) % 10
    _, non, _ = partition_indices(y, ClassPartition([c for c in range(10) if c != 4], 4), 10)
    assert len(non) == 0


def test_partition_rejects_out_of_range_class():
    with pytest.raises(ConfigurationError):
        partition_indices(np.array([0, 1]), ClassPartition([0], 12), 10)


def test_partition_rejects_target_in_source_and_empty_source():
    with pytest.raises(ConfigurationError):
        ClassPartition([1, 2], 2)
    with pytest.raises(ConfigurationError):
        ClassPartition([], 2)


def test_partition_accepts_dataset():
    ds = LabeledDataset(np.zeros((4, 2, 2, 1)), [0, 1, 9, 0], 10)
    src, _, _ = partition_indices(ds, ClassPartition([0], 9))
    assert src.tolist() == [0, 3]


@given(st.lists(st.integers(0, 6), min_size=0, max_size=80), st.sets(st.integers(0, 6), min_size=1, max_size=5),
       st.integers(0, 6))
def test_partition_lists_disjoint_and_cover(labels, sources, target):
    sources.discard(target)
    if not sources:
        return
    y = np.array(labels, dtype=np.int64)
    src, non, tgt = partition_indices(y, ClassPartition(sources, target), 7)
    all_idx = np.concatenate([src, non, tgt])
    assert len(set(all_idx.tolist())) == len(all_idx)
    assert sorted(all_idx.tolist()) == list(range(len(y)))
    assert all(y[i] in sources for i in src)
    assert all(y[i] == target for i in tgt)
    for arr in (src, non, tgt):
        assert np.all(np.diff(arr) > 0)


def test_seeded_subsample_examples():
    idx = np.arange(100)
    assert len(seeded_subsample(idx, 0.05, 0)) == 5
    assert set(seeded_subsample(idx, 1.0, 3).tolist()) == set(idx.tolist())
    assert seeded_subsample(idx, 0.3, 7).tolist() == seeded_subsample(idx, 0.3, 7).tolist()
    assert len(seeded_subsample(np.array([], dtype=int), 0.5, 0)) == 0


def test_seeded_subsample_avoids_float_noise():
    assert len(seeded_subsample(np.arange(100), 0.07, 0)) == 7


@given(st.lists(st.integers(0, 10_000), unique=True, max_size=200), st.floats(0.001, 1.0), st.integers(0, 2**32 - 1))
def test_seeded_subsample_properties(values, fraction, seed):
    idx = np.array(values, dtype=np.int64)
    out = seeded_subsample(idx, fraction, seed)
    assert len(out) == (math.ceil(fraction * len(idx) - 1e-9) if len(idx) else 0)
    assert set(out.tolist()) <= set(values)
    assert len(set(out.tolist())) == len(out)
    assert np.array_equal(out, seeded_subsample(idx, fraction, seed))


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_seeded_subsample_rejects_bad_fraction(fraction):
    with pytest.raises(ConfigurationError):
        seeded_subsample(np.arange(10), fraction, 0)


def test_per_class_subsample_respects_exclusion():
    y = np.repeat(np.arange(3), 20)
    first = per_class_subsample(y, [0, 1], 0.5, 0, tag="a")
    second = per_class_subsample(y, [0, 1], 0.5, 0, exclude=first, tag="b")
    assert len(first) == 20 and len(second) == 20
    assert not set(first.tolist()) & set(second.tolist())


@pytest.mark.parametrize("bad", [np.full((1, 2, 2, 1), 1.5), np.full((1, 2, 2, 1), -0.1),
                                 np.full((1, 2, 2, 1), np.nan), np.zeros((2, 2, 1)), np.zeros((1, 2, 2, 2))])
def test_image_validation_rejects(bad):
    with pytest.raises(ValueError):
        check_images(bad)


def test_image_is_immutable():
    img = as_image(np.zeros((3, 3)))
    assert img.shape == (3, 3, 1)
    with pytest.raises(ValueError):
        img[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        as_image(np.full((3, 3), np.inf))


def test_dataset_invariants():
    X = np.zeros((3, 4, 4, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        LabeledDataset(X, [0, 1, 3], 3)
    with pytest.raises(ValueError):
        LabeledDataset(X, [0, 1], 3)
    ds = LabeledDataset(X, [0, 1, 2], 3)
    with pytest.raises(ValueError):
        ds.X[0, 0, 0, 0] = 1.0
    X[0, 0, 0, 0] = 0.5  # the caller's array is left writable
    assert ds.class_counts().tolist() == [1, 1, 1]
    assert ds.subset([2]).y.tolist() == [2]


def test_attack_spec_validation_and_hash():
    part = ClassPartition([0], 1)
    with pytest.raises(ConfigurationError):
        AttackSpec("other", part)
    with pytest.raises(ConfigurationError):
        AttackSpec("baseline", part, poison_fraction=0.0)
    with pytest.raises(ConfigurationError):
        AttackSpec("baseline", part, cover_fraction=1.2)
    a = AttackSpec("baseline", part)
    assert a.poison_fraction == a.cover_fraction == 0.05
    assert a.spec_hash() == AttackSpec("baseline", ClassPartition([0], 1)).spec_hash()
    assert a.spec_hash() != AttackSpec("cassock1", part).spec_hash()


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(7, "poison", 3) == derive_seed(7, "poison", 3)
    assert derive_seed(7, "poison", 3) != derive_seed(7, "poison", 4)
    assert derive_seed(7, "poison") != derive_seed(8, "poison")
