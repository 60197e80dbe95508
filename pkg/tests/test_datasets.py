import struct

import numpy as np
import pytest
from PIL import Image

from ssba.core import ClassPartition, ConfigurationError, DependencyError, partition_indices
from ssba.datasets import (
    data_root,
    load_cifar10,
    load_dataset,
    load_image_dir,
    load_mnist,
    make_synthetic,
    read_cifar_binary,
    read_idx,
    stratified_subset,
)


def _write_idx(path, arr):
    header = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.astype(np.uint8).tobytes())


def test_idx_roundtrip(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    _write_idx(tmp_path / "a-idx3-ubyte", arr)
    assert np.array_equal(read_idx(tmp_path / "a-idx3-ubyte"), arr)


def test_mnist_loader_layout(tmp_path):
    base = tmp_path / "mnist"
    base.mkdir()
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28))
    _write_idx(base / "t10k-images-idx3-ubyte", imgs)
    _write_idx(base / "t10k-labels-idx1-ubyte", np.array([3, 1, 4, 1, 5]))
    ds = load_mnist("test", root=tmp_path)
    assert ds.X.shape == (5, 28, 28, 1)
    assert ds.y.tolist() == [3, 1, 4, 1, 5]
    assert np.allclose(ds.X[..., 0] * 255, imgs)


def test_cifar_binary_records(tmp_path):
    rng = np.random.default_rng(0)
    chw = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    labels = np.array([2, 7, 0], dtype=np.uint8)
    rec = np.concatenate([labels[:, None], chw.reshape(3, -1)], axis=1)
    (tmp_path / "b.bin").write_bytes(rec.tobytes())
    images, lab = read_cifar_binary(tmp_path / "b.bin")
    assert lab.tolist() == [2, 7, 0]
    assert np.array_equal(images, chw.transpose(0, 2, 3, 1))


def test_missing_cifar_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        load_cifar10("train", root=tmp_path)


def test_image_dir_loader(tmp_path):
    for c in range(3):
        d = tmp_path / "train" / str(c)
        d.mkdir(parents=True)
        for k in range(2):
            Image.fromarray(np.full((6, 5), 40 * c + k, np.uint8), "L").save(d / f"{k}.png")
    ds = load_image_dir(tmp_path, "train")
    assert ds.X.shape == (6, 6, 5, 1)
    assert ds.num_classes == 3
    assert ds.y.tolist() == [0, 0, 1, 1, 2, 2]
    assert ds.X.max() <= 1.0 and np.isclose(ds.X[5].max(), 81 / 255)


def test_unknown_dataset_id():
    with pytest.raises(ConfigurationError):
        load_dataset("imagenet")


def test_synthetic_and_stratified_subset():
    ds = make_synthetic(400, num_classes=4, seed=3)
    assert ds.class_counts().tolist() == [100] * 4
    sub = stratified_subset(ds, 100, seed=0)
    assert sub.class_counts().tolist() == [25] * 4
    assert np.array_equal(make_synthetic(400, num_classes=4, seed=3).X, ds.X)


MNIST_RAW = data_root() / "mnist" / "train-labels-idx1-ubyte"


@pytest.mark.skipif(not MNIST_RAW.exists(), reason="MNIST not prepared (scripts/prepare_data.py)")
def test_mnist_source_count_matches_independent_label_pass():
    ds = load_mnist("train")
    src, _, tgt = partition_indices(ds, ClassPartition([0], 1))
    # independent pass over the raw label bytes (8-byte idx1 header)
    raw = MNIST_RAW.read_bytes()[8:]
    assert len(src) == raw.count(b"\x00") == 5923
    assert len(tgt) == raw.count(b"\x01")
