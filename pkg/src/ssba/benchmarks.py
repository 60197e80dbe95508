"""Desk-scale reproduction suites with on-disk caching.

Each suite builds its configs, runs (or reuses) the corresponding run
directories under one root, and returns plain dictionaries. Rerunning a suite
whose runs are complete only reads reports back.
"""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import preset
from .core import DependencyError, derive_seed
from .datasets import data_root, stratified_indices
from .evaluation import build_validation, count_inversions, evaluate, sweep, write_results_table
from .training import fine_tune

logger = logging.getLogger(__name__)

PATCH_KINDS = ("baseline", "cassock1")
ATTACK_KINDS = ("baseline", "cassock1", "cassock2")


def benchmark_root(root=None):
    root = root or os.environ.get("SSBA_BENCHMARK_DIR") or data_root() / "benchmarks"
    return Path(root)


def datasets_available(*names):
    root = data_root()
    checks = {
        "mnist": root / "mnist" / "train-images-idx3-ubyte",
        "cifar10": root / "cifar10" / "cifar-10-batches-bin" / "test_batch.bin",
    }
    return all(checks[n].exists() or Path(str(checks[n]) + ".gz").exists() for n in names)


def _summary(cfg, run, report):
    return {"run_dir": str(run.path), "cda": report.cda, "asr": report.asr, "fpr": report.fpr,
            "seconds": pipeline.run_seconds(run), "flags": report.flags}


# ---------------------------------------------------------------------------
# MNIST table
# ---------------------------------------------------------------------------

def mnist_config(kind, root=None, seed=0):
    return preset("mnist", output_dir=str(benchmark_root(root) / "mnist"), seed=seed,
                  attack={"kind": kind, "source_classes": [0], "target_class": 1},
                  evaluation={"sizes": [2000, 2000, 4000]},
                  defences={"neural_cleanse": {"enabled": False}})


def mnist_suite(root=None, kinds=("none",) + PATCH_KINDS):
    out = {}
    for kind in kinds:
        cfg = mnist_config(kind, root)
        run, report = pipeline.run_experiment(cfg)
        out[kind] = _summary(cfg, run, report)
    return out


# ---------------------------------------------------------------------------
# CIFAR10 table
# ---------------------------------------------------------------------------

CIFAR_SOURCE, CIFAR_TARGET = 0, 7


def cifar_config(kind, root=None, seed=0, **sections):
    root = benchmark_root(root)
    attack = {"kind": kind, "source_classes": [CIFAR_SOURCE], "target_class": CIFAR_TARGET}
    if kind == "cassock2":
        clean = pipeline.RunDir.resolve(cifar_config("none", root, seed), create=False)
        attack["feature"] = {"surrogate": str(clean.checkpoint / "model.pt")}
    attack.update(sections.pop("attack", {}))
    return preset("cifar10", output_dir=str(root / sections.pop("subdir", "cifar10")), seed=seed,
                  attack=attack, evaluation={"sizes": [2000, 2000, 10000]}, **sections)


def cifar_suite(root=None, kinds=("none",) + ATTACK_KINDS):
    out = {}
    for kind in kinds:
        cfg = cifar_config(kind, root)
        run, report = pipeline.run_experiment(cfg)
        out[kind] = _summary(cfg, run, report)
    return out


# ---------------------------------------------------------------------------
# defences
# ---------------------------------------------------------------------------

def defence_suite(root=None, reps=10, kinds=ATTACK_KINDS):
    out = {}
    for kind in kinds:
        cfg = cifar_config(kind, root)
        run = pipeline.RunDir.resolve(cfg, create=False)
        with run.lock():
            rec = pipeline.stage_defend(cfg, run, reps=reps)
        out[kind] = {**rec["summary"], "reps": len(rec["repetitions"])}
    return out


# ---------------------------------------------------------------------------
# sweeps (reduced CIFAR10 preset)
# ---------------------------------------------------------------------------

SWEEP_GRID = (0.1, 0.2, 0.4, 0.6)
SWEEP_SCALE = {"dataset": {"train_limit": 10000}, "train": {"epochs": 15}}


def sweep_base(kind, axis, root=None):
    fixed = {"poison_fraction": {"cover_fraction": 0.1}, "cover_fraction": {"poison_fraction": 0.1}}[axis]
    return cifar_config(kind, root, subdir=f"sweep-{axis}", attack=fixed, **SWEEP_SCALE)


def sweep_suite(axis, root=None, grid=SWEEP_GRID, kinds=ATTACK_KINDS):
    rows = []
    for kind in kinds:
        rows.extend(sweep(axis, grid, sweep_base(kind, axis, root)))
    table = benchmark_root(root) / f"sweep-{axis}" / "results.csv"
    write_results_table(rows, table)
    summary = {}
    for kind in kinds:
        pts = sorted((r["axis_value"], r) for r in rows if r["attack_kind"] == kind)
        summary[kind] = {
            "grid": [v for v, _ in pts],
            "asr": [r["asr"] for _, r in pts],
            "fpr": [r["fpr"] for _, r in pts],
            "cda": [r["cda"] for _, r in pts],
            "errors": [r["error"] for _, r in pts if r.get("error")],
            "asr_inversions_up": count_inversions([r["asr"] for _, r in pts], "up"),
            "asr_inversions_down": count_inversions([r["asr"] for _, r in pts], "down"),
            "fpr_inversions_down": count_inversions([r["fpr"] for _, r in pts], "down"),
        }
    return summary


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def finetune_suite(root=None, epochs=100, checkpoints=(0, 25, 50, 100), fraction=0.2, kinds=ATTACK_KINDS):
    """Fine-tune the last 4 layers on a held-out clean slice of the test set; track ASR."""
    cache = benchmark_root(root) / "finetune.json"
    if cache.exists():
        rec = json.loads(cache.read_text())
        if rec.get("epochs") == epochs and sorted(rec.get("kinds", [])) == sorted(kinds):
            return rec
    out = {"epochs": epochs, "kinds": list(kinds), "results": {}}
    for kind in kinds:
        cfg = cifar_config(kind, root)
        run = pipeline.RunDir.resolve(cfg, create=False)
        clf = pipeline.load_model(run)
        test = pipeline.load_split(cfg, "test")
        tune_idx = stratified_indices(test.y, test.num_classes, int(fraction * len(test)),
                                      derive_seed(cfg.seed, "finetune-split"))
        tune = test.subset(tune_idx)
        rest = test.subset(np.setdiff1d(np.arange(len(test)), tune_idx))
        bd = pipeline.load_backdoors(cfg, run)[0]
        sets = build_validation(rest, bd, (2000, 2000, 4000), seed=derive_seed(cfg.seed, "finetune-val"))
        curve, model, done, t0 = {}, clf, 0, time.perf_counter()
        for target in sorted(set(checkpoints) | {epochs}):
            if target > done:
                model = fine_tune(model, tune.X, tune.y, layers_to_tune=4, epochs=target - done, lr=0.01,
                                  seed=derive_seed(cfg.seed, "finetune", done))
                done = target
            r = evaluate(model, sets)
            curve[str(target)] = {"cda": r.cda, "asr": r.asr, "fpr": r.fpr}
            logger.info("fine-tune %s epoch %d: %s", kind, target, curve[str(target)])
        out["results"][kind] = {"curve": curve, "seconds": time.perf_counter() - t0}
    cache.write_text(json.dumps(out, indent=2))
    return out



# ---------------------------------------------------------------------------
# cache status
# ---------------------------------------------------------------------------

def _stage_cached(cfg_fn, stage="evaluate"):
    try:
        cfg = cfg_fn()
        run = pipeline.RunDir.resolve(cfg, create=False)
    except DependencyError:
        return False
    return run.stage_done(stage, cfg)


def suite_cached(name, root=None, reps=10):
    """True when the named suite would only read reports back (no training or defence runs)."""
    if name == "mnist":
        return all(_stage_cached(lambda k=k: mnist_config(k, root)) for k in ("none",) + PATCH_KINDS)
    if name == "cifar10":
        return all(_stage_cached(lambda k=k: cifar_config(k, root)) for k in ("none",) + ATTACK_KINDS)
    if name == "defences":
        for kind in ATTACK_KINDS:
            if not _stage_cached(lambda: cifar_config(kind, root), "defend"):
                return False
            run = pipeline.RunDir.resolve(cifar_config(kind, root), create=False)
            rec = json.loads((run.reports / "defence.json").read_text())
            if len(rec.get("repetitions", [])) < reps:
                return False
        return True
    if name == "finetune":
        cache = benchmark_root(root) / "finetune.json"
        return cache.exists() and json.loads(cache.read_text()).get("epochs") == 100
    if name.startswith("sweep-"):
        axis = name[len("sweep-"):]
        return all(_stage_cached(lambda k=k, v=v: pipeline.point_config(sweep_base(k, axis, root), axis, v))
                   for k in ATTACK_KINDS for v in SWEEP_GRID)
    raise ValueError(f"unknown suite {name!r}")
