"""Run-directory persistence and the craft -> train -> evaluate -> defend stages.

Layout: ``<out>/<run-id>/{manifest,checkpoint,reports,plots}`` where run-id
is a config-hash prefix plus a timestamp. A run directory whose hash prefix
matches the config is reused, and a stage whose completion record carries the
same config hash is skipped unless ``force`` is set.
"""
from __future__ import annotations

import contextlib
import datetime as _dt
import json
import logging
import os
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .core import (
    ClassPartition,
    ConfigurationError,
    DependencyError,
    LabeledDataset,
    derive_seed,
    stable_hash,
)
from .datasets import load_dataset
from .evaluation import EvalReport, build_validation, draw_clean_set, evaluate_bundle, rate
from .models import ModelSpec
from .poisoning import Backdoor, BackdoorBundle, PoisonManifest, craft_multi
from .training import BackdoorClassifier, TrainConfig, train_backdoor, train_clean
from .triggers import (
    CORNERS,
    MixerConfig,
    extract_feature_trigger,
    load_trigger,
    make_patch_trigger,
    save_trigger,
    select_donors,
)

logger = logging.getLogger(__name__)

STAGES = ("craft", "train", "evaluate", "defend")
HASH_PREFIX = 12


class RunLockedError(RuntimeError):
    pass


def module_versions():
    import sklearn
    import torch

    return {"ssba": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def provenance(cfg: ExperimentConfig):
    return {"config_hash": cfg.config_hash(), "run_hash": cfg.config_hash("run"), "schema_hash": cfg.schema_hash(),
            "seed": cfg.seed, "versions": module_versions()}


def _write_json(path, obj):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

class RunDir:
    SUBDIRS = ("manifest", "checkpoint", "reports", "plots")

    def __init__(self, path):
        self.path = Path(path)

    @property
    def run_id(self):
        return self.path.name

    def __getattr__(self, name):
        if name in RunDir.SUBDIRS:
            return self.path / name
        raise AttributeError(name)

    @classmethod
    def resolve(cls, cfg: ExperimentConfig, create=True):
        out = Path(cfg.output_dir)
        prefix = cfg.config_hash("run")[:HASH_PREFIX]
        existing = sorted(p for p in out.glob(f"{prefix}-*") if p.is_dir()) if out.exists() else []
        if existing:
            return cls(existing[-1])
        if not create:
            raise DependencyError(f"no run directory for config {prefix} under {out}", artifact="run directory")
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        run = cls(out / f"{prefix}-{stamp}")
        run.create(cfg)
        return run

    def create(self, cfg):
        for sub in self.SUBDIRS:
            (self.path / sub).mkdir(parents=True, exist_ok=True)
        cfg.dump(self.path / "config.yaml")
        _write_json(self.path / "provenance.json", provenance(cfg))

    @contextlib.contextmanager
    def lock(self):
        lock = self.path / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = lock.read_text().strip() if lock.exists() else "?"
            if holder.isdigit() and not _pid_alive(int(holder)):
                lock.unlink(missing_ok=True)
                fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            else:
                raise RunLockedError(f"run directory {self.path} is locked by process {holder}")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def stage_record(self, stage):
        return self.reports / f"stage-{stage}.json"

    def stage_done(self, stage, cfg):
        rec = self.stage_record(stage)
        return rec.exists() and _read_json(rec).get("stage_hash") == stage_hash(cfg, stage)

    def mark_done(self, stage, cfg, **info):
        _write_json(self.stage_record(stage),
                    {**provenance(cfg), "stage": stage, "stage_hash": stage_hash(cfg, stage), **info})

    def require(self, path, artifact):
        if not Path(path).exists():
            raise DependencyError(f"missing upstream artifact {artifact} ({path})", artifact=artifact)
        return Path(path)


def stage_hash(cfg, stage):
    return cfg.config_hash({"craft": "run", "train": "run", "evaluate": "evaluate"}.get(stage, "full"))


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------

def model_spec(cfg):
    return ModelSpec(cfg.model.arch, cfg.image_shape, cfg.num_classes, cfg.model.width)


def train_config(cfg, seed=None):
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                       weight_decay=t.weight_decay, lr_schedule=t.lr_schedule, gamma=t.gamma,
                       margin=t.margin, width=cfg.model.width, seed=cfg.seed if seed is None else seed)


def load_split(cfg, split):
    limit = cfg.dataset.train_limit if split == "train" else cfg.dataset.test_limit
    return load_dataset(cfg.dataset.name, split, root=cfg.dataset.root, limit=limit, seed=cfg.seed)


def partitions(cfg):
    """One partition per backdoor; backdoor b shifts target and sources by b (mod N)."""
    a, n = cfg.attack, cfg.num_classes
    out = []
    for b in range(a.num_backdoors):
        target = (a.target_class + b) % n
        if a.num_source_classes is not None:
            out.append(ClassPartition.first_k(a.num_source_classes, target, n))
        else:
            out.append(ClassPartition([(int(s) + b) % n for s in a.source_classes], target))
    return out


def mixer_config(cfg, b=0):
    m = cfg.attack.mixer
    return MixerConfig(kind=m.kind, orientation=m.orientation, corner=m.corner, quantile=m.quantile,
                       min_overlap=m.min_overlap, seed=derive_seed(cfg.seed, "mixer", b))


def patch_trigger(cfg, b=0):
    t = cfg.attack.trigger
    start = CORNERS.index(t.corner) if t.corner in CORNERS else 0
    corner = CORNERS[(start + b) % len(CORNERS)]
    pattern = t.pattern if b < len(CORNERS) else "random"
    return make_patch_trigger(cfg.image_shape, area_fraction=t.area_fraction, corner=corner, pattern=pattern,
                              seed=derive_seed(cfg.seed, "trigger", b))


def surrogate_model(cfg, run, train_set):
    """Clean model the attacker uses to pick donors and extract feature triggers (cached)."""
    given = cfg.attack.feature.surrogate
    if given:
        if not Path(given).exists():
            raise DependencyError(f"surrogate checkpoint {given} not found", artifact="surrogate checkpoint")
        return BackdoorClassifier.load(given)
    path = run.checkpoint / "surrogate.pt"
    if path.exists():
        return BackdoorClassifier.load(path)
    clf = train_clean(train_set, model_spec(cfg), train_config(cfg, seed=derive_seed(cfg.seed, "surrogate")))
    clf.save(path, role="surrogate", **provenance(cfg))
    return clf


# ---------------------------------------------------------------------------
# merged-set persistence (delta against the base training set)
# ---------------------------------------------------------------------------

def save_merged(run, base, merged, manifest):
    idx = np.flatnonzero(manifest.roles != 0)
    np.savez_compressed(run.manifest / "merged-delta.npz", indices=idx, X=np.asarray(merged.X)[idx],
                        base_fingerprint=np.array(base.fingerprint()))


def load_merged(run, base, manifest):
    path = run.require(run.manifest / "merged-delta.npz", "merged dataset")
    with np.load(path) as z:
        if str(z["base_fingerprint"]) != base.fingerprint():
            raise DependencyError("merged-set delta was crafted from a different base dataset",
                                  artifact="merged dataset")
        X = np.array(base.X, copy=True)
        X[z["indices"]] = z["X"]
    return LabeledDataset(X, manifest.assigned_labels, base.num_classes, base.class_names)


def load_backdoors(cfg, run):
    parts = partitions(cfg)
    out = []
    for b, part in enumerate(parts):
        trig = load_trigger(run.require(run.manifest / f"trigger-{b}.json", f"trigger {b}").with_suffix(""))
        mixer = mixer_config(cfg, b) if cfg.attack.kind == "cassock2" else None
        out.append(Backdoor(cfg.attack.kind, part, trig, cfg.attack.alpha_train, mixer))
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_craft(cfg, run, force=False):
    if run.stage_done("craft", cfg) and not force:
        logger.info("craft already complete in %s", run.path)
        return
    train_set = load_split(cfg, "train")
    n = len(train_set)
    if cfg.attack.kind == "none":
        roles = np.zeros(n, np.int8)
        manifest = PoisonManifest(roles, train_set.y.copy(), train_set.y.copy(), np.full(n, -1, np.int16), (),
                                  cfg.config_hash("run"), cfg.seed)
        merged = train_set
    else:
        backdoors = []
        for b, part in enumerate(partitions(cfg)):
            if cfg.attack.kind == "cassock2":
                f = cfg.attack.feature
                surrogate = surrogate_model(cfg, run, train_set)
                donors, _ = select_donors(surrogate, train_set, part.target_class, n=f.donors,
                                          confidence_floor=f.confidence_floor)
                trig = extract_feature_trigger(surrogate, donors, lam=f.lam, noise_sigma=f.noise_sigma,
                                               steps=f.steps, lr=f.lr, seed=derive_seed(cfg.seed, "extract", b))
                backdoors.append(Backdoor("cassock2", part, trig, cfg.attack.alpha_train, mixer_config(cfg, b)))
            else:
                backdoors.append(Backdoor(cfg.attack.kind, part, patch_trigger(cfg, b), cfg.attack.alpha_train))
        merged, manifest = craft_multi(train_set, BackdoorBundle(backdoors),
                                       (cfg.attack.poison_fraction, cfg.attack.cover_fraction),
                                       seed=cfg.seed, spec_hash=cfg.config_hash("run"))
        for b, bd in enumerate(backdoors):
            save_trigger(bd.trigger, run.manifest / f"trigger-{b}")
    manifest.save(run.manifest / "manifest.jsonl")
    save_merged(run, train_set, merged, manifest)
    run.mark_done("craft", cfg, counts=manifest.counts(), base_fingerprint=train_set.fingerprint())


def stage_train(cfg, run, force=False):
    if run.stage_done("train", cfg) and not force:
        logger.info("train already complete in %s", run.path)
        return
    man_path = run.require(run.manifest / "manifest.jsonl", "manifest")
    manifest = PoisonManifest.load(man_path)
    base = load_split(cfg, "train")
    merged = load_merged(run, base, manifest)
    spec, tcfg = model_spec(cfg), train_config(cfg)
    if cfg.attack.kind == "none":
        clf = train_clean(merged, spec, tcfg)
    else:
        clf = train_backdoor(merged, manifest, spec, tcfg, objective=cfg.objective())
    snapshot = {
        "final_loss": clf.loss_history_[-1] if clf.loss_history_ else None,
        "train_accuracy": rate(clf.predict(merged.X), merged.y),
        "fit_time": getattr(clf, "fit_time_", None),
    }
    clf.save(run.checkpoint / "model.pt", arch=cfg.model.arch, metrics=snapshot, **provenance(cfg))
    run.mark_done("train", cfg, metrics=snapshot)


def load_model(run):
    return BackdoorClassifier.load(run.require(run.checkpoint / "model.pt", "checkpoint"))


def validation_sets(cfg, run, test_set=None, seed=None):
    test_set = load_split(cfg, "test") if test_set is None else test_set
    seed = cfg.seed if seed is None else seed
    sizes = tuple(int(s) for s in cfg.evaluation.sizes)
    return [build_validation(test_set, bd, sizes, seed=derive_seed(seed, "val", b))
            for b, bd in enumerate(load_backdoors(cfg, run))]


def stage_evaluate(cfg, run, force=False):
    path = run.reports / "eval.json"
    if run.stage_done("evaluate", cfg) and path.exists() and not force:
        return EvalReport.from_dict(_read_json(path))
    clf = load_model(run)
    test_set = load_split(cfg, "test")
    if cfg.attack.kind == "none":
        clean, note = draw_clean_set(test_set, int(cfg.evaluation.sizes[2]), cfg.seed)
        report = EvalReport(cda=rate(clf.predict(clean.X), clean.y), asr=None, fpr=None, n_clean=len(clean),
                            n_poisoned=0, n_cover=0, spec_hash=cfg.config_hash("evaluate"), seed=cfg.seed,
                            flags=[f"resampled clean: {note}"] if note else [])
    else:
        report = evaluate_bundle(clf, validation_sets(cfg, run, test_set), cfg.config_hash("evaluate"), cfg.seed)
    _write_json(path, {**report.to_dict(), **provenance(cfg), "run_id": run.run_id,
                       "dataset": cfg.dataset.name, "attack_kind": cfg.attack.kind})
    run.mark_done("evaluate", cfg)
    return report


# ---------------------------------------------------------------------------
# defences
# ---------------------------------------------------------------------------

def defend_once(cfg, run, seed, clf=None, test_set=None, merged=None, manifest=None, which=None):
    """One repetition of every enabled defence with stochastic parts seeded by ``seed``."""
    from .defences import ExtendedNeuralCleanse, FebruusPurifier, ScanStyleDetector

    clf = load_model(run) if clf is None else clf
    test_set = load_split(cfg, "test") if test_set is None else test_set
    d = cfg.defences
    which = which or [k for k in ("neural_cleanse", "scan", "februus") if getattr(d, k).enabled]
    targets = {p.target_class for p in partitions(cfg)} if cfg.attack.kind != "none" else set()
    out = {"seed": int(seed)}

    if "neural_cleanse" in which:
        nc = d.neural_cleanse
        clean, _ = draw_clean_set(test_set, max(nc.n_samples * cfg.num_classes * 2, 200), derive_seed(seed, "nc"))
        det = ExtendedNeuralCleanse(steps=nc.steps, lam=nc.lam, lr=nc.lr, n_samples=nc.n_samples,
                                    threshold=nc.threshold, seed=seed).fit(clf, clean.X, clean.y)
        out["neural_cleanse"] = {**det.verdict_.to_dict(),
                                 "detected": any(b in targets for _, b in det.flagged_pairs_),
                                 "box_violations": det.box_violations_}

    if "scan" in which:
        sc = d.scan
        if manifest is None:
            manifest = PoisonManifest.load(run.require(run.manifest / "manifest.jsonl", "manifest"))
        if merged is None:
            merged = load_merged(run, load_split(cfg, "train"), manifest)
        holdout, _ = draw_clean_set(test_set, min(len(test_set), 200 * cfg.num_classes), derive_seed(seed, "scan"))
        det = ScanStyleDetector(n_components=sc.n_components, threshold=sc.threshold,
                                min_class_size=sc.min_class_size, seed=seed)
        det.fit(clf.embed(merged.X), merged.y, clf.embed(holdout.X), holdout.y)
        poisoned = manifest.roles == 1
        suspects = np.concatenate([v for v in det.suspect_indices_.values()]) if det.suspect_indices_ \
            else np.empty(0, np.int64)
        out["scan"] = {
            "flagged_classes": det.flagged_classes_,
            "anomaly": det.anomaly_,
            "skipped": det.skipped_,
            "detected": any(c in targets for c in det.flagged_classes_),
            "n_suspects": int(len(suspects)),
            "suspect_precision": float(poisoned[suspects].mean()) if len(suspects) else None,
        }

    if "februus" in which and cfg.attack.kind != "none":
        fb = d.februus
        sets = validation_sets(cfg, run, test_set, seed=seed)
        X = np.concatenate([s.poisoned.X[: fb.n_inputs] for s in sets])
        truth = np.concatenate([s.poisoned_true_labels[: fb.n_inputs] for s in sets])
        pur = FebruusPurifier(clf, threshold=fb.threshold)
        _, pred, skipped = pur.purify(X)
        clean, _ = draw_clean_set(test_set, fb.n_inputs, derive_seed(seed, "februus-clean"))
        _, clean_pred, _ = pur.purify(clean.X)
        out["februus"] = {
            "repair_rate": rate(pred, truth),
            "attack_rate_before": rate(pur.last_original_predictions_, sets[0].target_class) if len(sets) == 1
            else None,
            "skipped": int(skipped.sum()),
            "clean_unchanged": rate(clean_pred, clf.predict(clean.X)),
        }
    return out


def stage_defend(cfg, run, force=False, reps=1):
    path = run.reports / "defence.json"
    if path.exists() and not force:
        rec = _read_json(path)
        if run.stage_done("defend", cfg) and len(rec.get("repetitions", [])) >= reps:
            return rec
    clf = load_model(run)
    test_set = load_split(cfg, "test")
    manifest = PoisonManifest.load(run.require(run.manifest / "manifest.jsonl", "manifest"))
    merged = load_merged(run, load_split(cfg, "train"), manifest)
    results = [defend_once(cfg, run, derive_seed(cfg.seed, "defend", r), clf, test_set, merged, manifest)
               for r in range(reps)]
    summary = {}
    for key in ("neural_cleanse", "scan"):
        vals = [r[key]["detected"] for r in results if key in r]
        if vals:
            summary[f"{key}_detection_rate"] = float(np.mean(vals))
    vals = [r["februus"]["repair_rate"] for r in results if "februus" in r]
    if vals:
        summary["februus_repair_rate"] = float(np.mean(vals))
    rec = {**provenance(cfg), "run_id": run.run_id, "attack_kind": cfg.attack.kind, "summary": summary,
           "repetitions": results}
    _write_json(path, rec)
    run.mark_done("defend", cfg, summary=summary)
    return rec


def record_timing(run, stage, seconds):
    path = run.reports / "timing.json"
    rec = _read_json(path) if path.exists() else {}
    rec[stage] = float(seconds)
    _write_json(path, rec)


def run_seconds(run, stages=("craft", "train", "evaluate")):
    path = run.reports / "timing.json"
    rec = _read_json(path) if path.exists() else {}
    return sum(rec.get(s, 0.0) for s in stages)


STAGE_FUNCS = {"craft": stage_craft, "train": stage_train, "evaluate": stage_evaluate, "defend": stage_defend}


def run_stages(cfg, stages=("craft", "train", "evaluate"), force=False, run=None):
    """Run ``stages`` in order inside one locked run directory; returns (run, last stage result)."""
    cfg.validate()
    run = RunDir.resolve(cfg) if run is None else run
    result = None
    with run.lock():
        cfg.dump(run.path / "config.yaml")
        for stage in stages:
            if stage not in STAGE_FUNCS:
                raise ConfigurationError(f"unknown stage {stage!r}")
            logger.info("stage %s in %s", stage, run.path)
            fresh = force or not run.stage_done(stage, cfg)
            t0 = time.perf_counter()
            result = STAGE_FUNCS[stage](cfg, run, force=force)
            if fresh:
                record_timing(run, stage, time.perf_counter() - t0)
    return run, result


def run_experiment(cfg, force=False):
    run, report = run_stages(cfg, ("craft", "train", "evaluate"), force=force)
    return run, report


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------

def point_config(base_cfg, axis, value):
    return base_cfg.with_overrides([f"attack.{axis}={value}"])


def run_sweep_point(base_cfg, axis, value):
    cfg = point_config(base_cfg, axis, value)
    run, report = run_experiment(cfg)
    _write_json(run.reports / "sweep-point.json", {"axis": axis, "axis_value": value, **provenance(cfg)})
    return run.run_id, report


def collect_reports(root):
    """Rows of the results table for every completed run below ``root``.

    Raises ConfigurationError when runs disagree on the config schema.
    """
    rows, schemas = [], set()
    for path in sorted(Path(root).rglob("reports/eval.json")):
        rec = _read_json(path)
        schemas.add(rec.get("schema_hash"))
        point = path.parent / "sweep-point.json"
        sp = _read_json(point) if point.exists() else {}
        rows.append({
            "run_id": rec.get("run_id", path.parent.parent.name),
            "dataset": rec.get("dataset"), "attack_kind": rec.get("attack_kind"),
            "axis": sp.get("axis", ""), "axis_value": sp.get("axis_value", ""),
            "cda": rec.get("cda"), "asr": rec.get("asr"), "fpr": rec.get("fpr"), "seed": rec.get("seed"),
        })
    if len(schemas) > 1:
        raise ConfigurationError(f"refusing to aggregate runs with mismatched config schemas: {sorted(map(str, schemas))}")
    return rows


def sweep_name(base_cfg, axis, grid):
    return f"sweep-{axis}-{stable_hash({'cfg': base_cfg.config_hash(), 'grid': list(grid)}, 8)}"
