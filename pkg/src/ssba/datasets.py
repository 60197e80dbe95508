"""Dataset ingestion: MNIST idx files, CIFAR10 binary/pickle batches, image directories.

Every loader returns a :class:`~ssba.core.LabeledDataset` with pixels rescaled
to [0, 1]. The cache root defaults to ``$SSBA_DATA_ROOT`` or ``~/.cache/ssba``.
"""
from __future__ import annotations

import gzip
import os
import pickle
from pathlib import Path

import numpy as np

from .core import ConfigurationError, DependencyError, LabeledDataset, make_rng

DATA_ROOT_ENV = "SSBA_DATA_ROOT"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"}

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
)


def data_root(root=None):
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "ssba"))


def _open(path):
    path = Path(path)
    if not path.exists() and path.with_suffix(path.suffix + ".gz").exists():
        path = path.with_suffix(path.suffix + ".gz")
    if not path.exists():
        raise DependencyError(f"missing dataset file {path}", artifact=str(path))
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path):
    """Parse an idx file (the MNIST container format) into a numpy array."""
    with _open(path) as fh:
        raw = fh.read()
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00":
        raise ValueError(f"{path}: bad idx magic")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4)
    data = np.frombuffer(raw, dtype=dtypes[dtype_code], offset=4 + 4 * ndim)
    return data.reshape(tuple(int(d) for d in dims))


def load_mnist(split="train", root=None):
    base = data_root(root) / "mnist"
    prefix = "train" if split == "train" else "t10k"
    images = read_idx(base / f"{prefix}-images-idx3-ubyte")
    labels = read_idx(base / f"{prefix}-labels-idx1-ubyte")
    X = (images.astype(np.float32) / 255.0)[..., None]
    return LabeledDataset(X, labels.astype(np.int64), 10, tuple(str(i) for i in range(10)))


def read_cifar_binary(path):
    """CIFAR10 binary batch: 10000 records of 1 label byte + 3072 CHW pixel bytes."""
    with _open(path) as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def read_cifar_pickle(path):
    with _open(path) as fh:
        batch = pickle.load(fh, encoding="bytes")
    data = np.asarray(batch[b"data"], dtype=np.uint8)
    labels = np.asarray(batch[b"labels"], dtype=np.int64)
    return data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1), labels


def load_cifar10(split="train", root=None):
    base = data_root(root) / "cifar10"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    if (base / "cifar-10-batches-bin").exists():
        parts = [read_cifar_binary(base / "cifar-10-batches-bin" / f"{n}.bin") for n in names]
    elif (base / "cifar-10-batches-py").exists():
        parts = [read_cifar_pickle(base / "cifar-10-batches-py" / n) for n in names]
    else:
        raise DependencyError(f"no CIFAR10 batches under {base}; run scripts/prepare_data.py", artifact=str(base))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images.astype(np.float32) / 255.0, labels, 10, CIFAR10_CLASSES)


def load_image_dir(root, split, image_size=None, channels=None):
    """Read ``<root>/<split>/<class-index>/<image files>``."""
    from PIL import Image

    base = Path(root) / split
    if not base.is_dir():
        raise DependencyError(f"missing image directory {base}", artifact=str(base))
    class_dirs = sorted((d for d in base.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    if not class_dirs:
        raise DependencyError(f"no class directories in {base}", artifact=str(base))
    images, labels = [], []
    for d in class_dirs:
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            im = Image.open(f)
            if channels == 1:
                im = im.convert("L")
            elif channels == 3 or im.mode not in ("L",):
                im = im.convert("RGB")
            if image_size is not None:
                im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr)
            labels.append(int(d.name))
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise ValueError(f"images under {base} have mixed shapes {sorted(shapes)}; pass image_size")
    num_classes = max(int(d.name) for d in class_dirs) + 1
    return LabeledDataset(np.stack(images), np.asarray(labels), num_classes)


def make_synthetic(n=1000, num_classes=4, image_shape=(12, 12, 1), seed=0):
    """Small procedurally generated image task; each class lights up its own quadrant-like blob.

    Used for fast smoke runs of the full pipeline without downloads.
    """
    h, w, c = image_shape
    rng = make_rng(seed, "synthetic")
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    X = rng.uniform(0.0, 0.3, size=(n, h, w, c)).astype(np.float32)
    rows = np.linspace(1, h - 4, num=num_classes).astype(int)
    cols = np.linspace(1, w - 4, num=num_classes).astype(int)[::-1]
    for k in range(num_classes):
        sel = y == k
        X[sel, rows[k]:rows[k] + 3, cols[k]:cols[k] + 3, :] += 0.6
    X = np.clip(X, 0.0, 1.0)
    return LabeledDataset(X, y, num_classes)


DATASETS = ("mnist", "cifar10", "gtsrb", "synthetic")


def load_dataset(name, split="train", root=None, limit=None, seed=0):
    """Load a dataset by id; ``limit`` keeps a seeded class-stratified subset."""
    if name == "mnist":
        ds = load_mnist(split, root)
    elif name == "cifar10":
        ds = load_cifar10(split, root)
    elif name == "gtsrb":
        ds = load_image_dir(data_root(root) / "gtsrb", split, image_size=(48, 48), channels=3)
    elif name == "synthetic":
        ds = make_synthetic(n=2000 if split == "train" else 800, seed=seed + (0 if split == "train" else 1))
    else:
        raise ConfigurationError(f"unknown dataset id {name!r}; expected one of {DATASETS}")
    if limit is not None and limit < len(ds):
        ds = stratified_subset(ds, limit, seed)
    return ds


def stratified_indices(y, num_classes, n, seed):
    """Sorted indices of a seeded subset keeping class proportions (about ``n`` in total)."""
    rng = make_rng(seed, "stratified")
    frac = n / len(y)
    keep = [np.empty(0, dtype=np.int64)]
    for c in range(num_classes):
        members = np.flatnonzero(y == c)
        k = int(round(frac * len(members)))
        if k:
            keep.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(keep))


def stratified_subset(ds, n, seed):
    return ds.subset(stratified_indices(ds.y, ds.num_classes, n, seed))
