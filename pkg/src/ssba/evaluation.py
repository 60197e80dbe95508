"""Clean-data accuracy, attack success rate and false positive rate; validation sets; sweeps."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import LabeledDataset, derive_seed, make_rng, partition_indices

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("run_id", "dataset", "attack_kind", "axis", "axis_value", "cda", "asr", "fpr", "seed")
SWEEP_AXES = ("poison_fraction", "cover_fraction", "num_source_classes", "num_backdoors")


@dataclass
class ValidationSets:
    """Poisoned (expected label T), cover (expected ground truth) and clean sets."""

    poisoned: LabeledDataset
    cover: LabeledDataset
    clean: LabeledDataset
    target_class: int
    poisoned_true_labels: np.ndarray
    resampled: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    cda: float
    asr: float | None
    fpr: float | None
    n_clean: int
    n_poisoned: int
    n_cover: int
    spec_hash: str = ""
    seed: int = 0
    wall_time: float = 0.0
    flags: list = field(default_factory=list)
    per_backdoor: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _draw(pool, n, rng):
    replace = n > len(pool)
    return rng.choice(pool, size=n, replace=replace), replace


def draw_clean_set(test_set, n, seed=0):
    """Clean evaluation images; independent of the partition so every model sees the same set."""
    idx, rep = _draw(np.arange(len(test_set)), n, make_rng(seed, "validation-clean"))
    note = f"{n} requested from {len(test_set)} test images" if rep else ""
    return test_set.subset(idx if rep else np.sort(idx)), note


def build_validation(test_set, backdoor, sizes=(500, 500, 1000), seed=0):
    """Stamp inference-time triggers onto held-out images.

    Populations smaller than the requested size are sampled with replacement
    and noted in ``resampled``. A partition whose non-source set is empty
    gives an empty cover set.
    """
    n_p, n_c, n_cl = sizes
    part = backdoor.partition
    src, non, _ = partition_indices(test_set.y, part, test_set.num_classes)
    rng = make_rng(seed, "validation")
    resampled = {}

    if len(src) == 0:
        raise ValueError("test set holds no source-class images")
    p_idx, rep = _draw(src, n_p, rng)
    if rep:
        resampled["poisoned"] = f"{n_p} requested from {len(src)} source images"
    p_seeds = [derive_seed(seed, "val-mix-p", i) for i in range(n_p)]
    Xp = backdoor.stamp_inference(test_set.X[p_idx], p_seeds)
    poisoned = LabeledDataset(Xp, np.full(n_p, part.target_class), test_set.num_classes)

    if len(non) == 0 or n_c == 0:
        cover = LabeledDataset(np.empty((0,) + test_set.image_shape, np.float32), np.empty(0, np.int64),
                               test_set.num_classes)
    else:
        c_idx, rep = _draw(non, n_c, rng)
        if rep:
            resampled["cover"] = f"{n_c} requested from {len(non)} non-source images"
        c_seeds = [derive_seed(seed, "val-mix-c", i) for i in range(n_c)]
        cover = LabeledDataset(backdoor.stamp_inference(test_set.X[c_idx], c_seeds), test_set.y[c_idx],
                               test_set.num_classes)

    clean, note = draw_clean_set(test_set, n_cl, seed)
    if note:
        resampled["clean"] = note
    return ValidationSets(poisoned, cover, clean, part.target_class, test_set.y[p_idx].copy(), resampled)


def rate(pred, expected):
    pred = np.asarray(pred)
    if len(pred) == 0:
        return None
    return float(np.mean(pred == expected))


def evaluate(handle, sets: ValidationSets, spec_hash="", seed=0):
    """CDA on the clean set, ASR on the poisoned set, FPR on the cover set (None if empty)."""
    t0 = time.perf_counter()
    cda = rate(handle.predict(sets.clean.X), sets.clean.y)
    asr = rate(handle.predict(sets.poisoned.X), sets.target_class) if len(sets.poisoned) else None
    fpr = rate(handle.predict(sets.cover.X), sets.target_class) if len(sets.cover) else None
    flags = [f"resampled {k}: {v}" for k, v in sets.resampled.items()]
    if fpr is None:
        flags.append("fpr not applicable: empty cover population")
    return EvalReport(
        cda=cda, asr=asr, fpr=fpr,
        n_clean=len(sets.clean), n_poisoned=len(sets.poisoned), n_cover=len(sets.cover),
        spec_hash=spec_hash, seed=int(seed), wall_time=time.perf_counter() - t0, flags=flags,
    )


def evaluate_bundle(handle, sets_list, spec_hash="", seed=0):
    """Several backdoors in one model: CDA from the first set, ASR/FPR averaged over backdoors."""
    reports = [evaluate(handle, s, spec_hash, seed) for s in sets_list]
    asrs = [r.asr for r in reports if r.asr is not None]
    fprs = [r.fpr for r in reports if r.fpr is not None]
    out = EvalReport(
        cda=reports[0].cda,
        asr=float(np.mean(asrs)) if asrs else None,
        fpr=float(np.mean(fprs)) if fprs else None,
        n_clean=reports[0].n_clean,
        n_poisoned=sum(r.n_poisoned for r in reports),
        n_cover=sum(r.n_cover for r in reports),
        spec_hash=spec_hash, seed=int(seed),
        wall_time=sum(r.wall_time for r in reports),
        flags=sorted({f for r in reports for f in r.flags}),
        per_backdoor=[{"asr": r.asr, "fpr": r.fpr} for r in reports],
    )
    return out


def count_inversions(values, direction="up"):
    """Adjacent pairs that break a monotone trend (ties are not inversions)."""
    v = [x for x in values if x is not None]
    if direction == "up":
        return sum(1 for a, b in zip(v, v[1:]) if b < a)
    return sum(1 for a, b in zip(v, v[1:]) if b > a)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sweep(axis, grid, base_config, run_point=None):
    """One craft -> train -> evaluate run per grid value; failures are kept as rows.

    ``run_point(config, axis, value)`` returns ``(run_id, EvalReport)``; the
    default runs the full experiment pipeline.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    if run_point is None:
        from .pipeline import run_sweep_point as run_point

    rows = []
    for value in grid:
        row = {
            "run_id": "", "dataset": base_config.dataset.name, "attack_kind": base_config.attack.kind,
            "axis": axis, "axis_value": value, "cda": None, "asr": None, "fpr": None,
            "seed": base_config.seed, "error": "",
        }
        try:
            run_id, report = run_point(base_config, axis, value)
            row.update(run_id=run_id, cda=report.cda, asr=report.asr, fpr=report.fpr)
        except Exception as exc:  # recorded per row, the sweep continues
            logger.exception("sweep point %s=%s failed", axis, value)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_results_table(rows, path):
    path = Path(path)
    cols = list(RESULT_COLUMNS) + (["error"] if any(r.get("error") for r in rows) else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    return path


def read_results_table(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("cda", "asr", "fpr", "axis_value"):
            if r.get(k) not in (None, ""):
                r[k] = float(r[k])
            else:
                r[k] = None
    return rows


def plot_sweep(rows, path, metrics=("cda", "asr", "fpr")):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    axes = np.atleast_1d(axes)
    kinds = sorted({r["attack_kind"] for r in rows})
    axis_name = rows[0]["axis"] if rows else ""
    for ax, metric in zip(axes, metrics):
        for kind in kinds:
            pts = sorted((float(r["axis_value"]), r[metric]) for r in rows
                         if r["attack_kind"] == kind and r.get(metric) is not None)
            if pts:
                ax.plot(*zip(*pts), marker="o", label=kind)
        ax.set_xlabel(axis_name)
        ax.set_ylabel(metric.upper())
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
