"""Fetch MNIST and CIFAR10 into the dataset cache in their canonical binary layouts.

Both datasets are pulled from npm packages (``mnist-data`` ships the raw idx files,
``tfjs-cifar10`` ships one PNG sprite per batch, one 32x32 image per row). The sprites
are re-encoded as the standard ``cifar-10-batches-bin`` records so the regular loaders
can read them.

    python scripts/prepare_data.py [--root DIR]
"""
import argparse
import json
import os
import shutil
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

MNIST_FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def npm_fetch(package, workdir):
    out = subprocess.run(
        ["npm", "pack", package, "--silent"], cwd=workdir, check=True, capture_output=True, text=True
    )
    tgz = Path(workdir) / out.stdout.strip().splitlines()[-1]
    dest = Path(workdir) / package
    with tarfile.open(tgz) as tf:
        tf.extractall(dest)
    return dest / "package"


def prepare_mnist(root, workdir):
    target = root / "mnist"
    if all((target / f).exists() for f in MNIST_FILES):
        print(f"mnist already present in {target}")
        return
    pkg = npm_fetch("mnist-data", workdir)
    target.mkdir(parents=True, exist_ok=True)
    for f in MNIST_FILES:
        shutil.copyfile(pkg / "data" / f, target / f)
    print(f"mnist -> {target}")


def _sprite_to_records(png, labels):
    px = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)  # (n, 1024, 3)
    n = px.shape[0]
    if n != len(labels):
        raise ValueError(f"{png}: {n} rows but {len(labels)} labels")
    chw = px.reshape(n, 32, 32, 3).transpose(0, 3, 1, 2).reshape(n, 3072)
    rec = np.empty((n, 3073), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = chw
    return rec.tobytes()


def prepare_cifar10(root, workdir):
    target = root / "cifar10" / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    if all((target / n).exists() for n in names):
        print(f"cifar10 already present in {target}")
        return
    pkg = npm_fetch("tfjs-cifar10", workdir)
    train_labels = json.loads((pkg / "train_lables.json").read_text())
    test_labels = json.loads((pkg / "test_lables.json").read_text())
    target.mkdir(parents=True, exist_ok=True)
    for i in range(5):
        chunk = train_labels[i * 10000 : (i + 1) * 10000]
        (target / f"data_batch_{i + 1}.bin").write_bytes(_sprite_to_records(pkg / f"data_batch_{i + 1}.png", chunk))
    (target / "test_batch.bin").write_bytes(_sprite_to_records(pkg / "test_batch.png", test_labels))
    print(f"cifar10 -> {target}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_root = os.environ.get("SSBA_DATA_ROOT", str(Path.home() / ".cache" / "ssba"))
    parser.add_argument("--root", default=default_root)
    parser.add_argument("--only", choices=["mnist", "cifar10"])
    args = parser.parse_args()
    root = Path(args.root)
    with tempfile.TemporaryDirectory() as tmp:
        if args.only in (None, "mnist"):
            prepare_mnist(root, tmp)
        if args.only in (None, "cifar10"):
            prepare_cifar10(root, tmp)


if __name__ == "__main__":
    main()
