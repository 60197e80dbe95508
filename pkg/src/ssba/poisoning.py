"""Crafting poisoned (source -> target) and cover (non-source, label kept) samples.

Selected samples are replaced in place, so the merged training set keeps the
original size and class metadata. Counts are ceil(fraction * class population)
per class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .core import (
    AttackSpec,
    ClassPartition,
    ConfigurationError,
    DependencyError,
    LabeledDataset,
    derive_seed,
    per_class_subsample,
    stable_hash,
)
from .triggers import FeatureTrigger, MixerConfig, PatchTrigger, apply_patch_batch, mix_batch

CLEAN, POISONED, COVER = 0, 1, 2
ROLE_NAMES = {CLEAN: "clean", POISONED: "poisoned", COVER: "cover"}
ROLE_CODES = {v: k for k, v in ROLE_NAMES.items()}


@dataclass(frozen=True)
class Backdoor:
    """One trigger/partition pair plus how it is stamped during training."""

    kind: str
    partition: ClassPartition
    trigger: object
    alpha_train: float = 0.5
    mixer: MixerConfig = None

    def __post_init__(self):
        if self.kind == "cassock2":
            if not isinstance(self.trigger, FeatureTrigger):
                raise DependencyError("cassock2 needs an extracted feature trigger", artifact="feature_trigger")
            if self.mixer is None:
                raise ConfigurationError("cassock2 needs a mixer configuration")
            if self.trigger.target_class != self.partition.target_class:
                raise ConfigurationError("feature trigger was extracted for a different target class")
        elif not isinstance(self.trigger, PatchTrigger):
            raise ConfigurationError(f"{self.kind} needs a patch trigger")

    @property
    def trigger_id(self):
        return self.trigger.content_hash()

    def stamp_training(self, X, role, seeds):
        """Apply the training-time trigger for ``role`` (POISONED or COVER)."""
        if self.kind == "cassock2":
            return mix_batch(X, self.trigger, self.mixer, seeds)
        if self.kind == "cassock1" and role == POISONED:
            return apply_patch_batch(X, self.trigger, alpha=self.alpha_train)
        return apply_patch_batch(X, self.trigger, alpha=1.0)

    def stamp_inference(self, X, seeds):
        """Inference-time trigger: opaque patch, or the same mixer as training."""
        if self.kind == "cassock2":
            return mix_batch(X, self.trigger, self.mixer, seeds)
        return apply_patch_batch(X, self.trigger, alpha=1.0)


def backdoor_from_spec(spec: AttackSpec):
    if spec.kind == "cassock2" and spec.trigger is None:
        raise DependencyError("cassock2 spec has no extracted feature trigger", artifact="feature_trigger")
    if spec.trigger is None:
        raise ConfigurationError(f"{spec.kind} spec has no patch trigger")
    return Backdoor(spec.kind, spec.partition, spec.trigger, spec.alpha_train, spec.mixer)


@dataclass(frozen=True)
class BackdoorBundle:
    backdoors: tuple

    def __init__(self, backdoors):
        backdoors = tuple(backdoors)
        if not backdoors:
            raise ConfigurationError("a bundle needs at least one backdoor")
        ids = [b.trigger_id for b in backdoors]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("bundle triggers must be pairwise distinct")
        object.__setattr__(self, "backdoors", backdoors)

    def __len__(self):
        return len(self.backdoors)


@dataclass(frozen=True, eq=False)
class PoisonManifest:
    """Per-sample provenance of a crafted training set (indexed by original position)."""

    roles: np.ndarray
    original_labels: np.ndarray
    assigned_labels: np.ndarray
    trigger_slot: np.ndarray
    trigger_ids: tuple
    spec_hash: str
    seed: int

    def __len__(self):
        return len(self.roles)

    def indices(self, role):
        return np.flatnonzero(self.roles == ROLE_CODES.get(role, role))

    def records(self):
        for i in range(len(self.roles)):
            slot = int(self.trigger_slot[i])
            yield {
                "index": i,
                "role": ROLE_NAMES[int(self.roles[i])],
                "original_label": int(self.original_labels[i]),
                "assigned_label": int(self.assigned_labels[i]),
                "trigger_id": self.trigger_ids[slot] if slot >= 0 else None,
            }

    def counts(self):
        return {name: int((self.roles == code).sum()) for code, name in ROLE_NAMES.items()}

    def header(self):
        return {
            "type": "header",
            "spec_hash": self.spec_hash,
            "seed": int(self.seed),
            "n_records": int(len(self.roles)),
            "trigger_ids": list(self.trigger_ids),
            "counts": self.counts(),
        }

    def to_jsonl(self):
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines.extend(json.dumps(r, sort_keys=True) for r in self.records())
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text):
        lines = text.splitlines()
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise ValueError("manifest must start with a header record")
        ids = tuple(header["trigger_ids"])
        n = header["n_records"]
        roles = np.zeros(n, dtype=np.int8)
        orig = np.zeros(n, dtype=np.int64)
        assigned = np.zeros(n, dtype=np.int64)
        slot = np.full(n, -1, dtype=np.int16)
        for line in lines[1:]:
            r = json.loads(line)
            i = r["index"]
            roles[i] = ROLE_CODES[r["role"]]
            orig[i] = r["original_label"]
            assigned[i] = r["assigned_label"]
            slot[i] = -1 if r["trigger_id"] is None else ids.index(r["trigger_id"])
        return cls(roles, orig, assigned, slot, ids, header["spec_hash"], header["seed"])

    @classmethod
    def load(cls, path):
        return cls.from_jsonl(Path(path).read_text())


def craft_multi(dataset: LabeledDataset, bundle: BackdoorBundle, fractions=(0.05, 0.05), seed=0,
                spec_hash=None):
    """Insert every backdoor of ``bundle`` into one training set.

    Draws for later backdoors exclude samples already used by earlier ones, so
    no image carries two roles.
    """
    poison_fraction, cover_fraction = fractions
    n = len(dataset)
    y = dataset.y
    X = np.array(dataset.X, copy=True)
    roles = np.zeros(n, dtype=np.int8)
    assigned = y.copy()
    slot = np.full(n, -1, dtype=np.int16)
    used = np.empty(0, dtype=np.int64)

    for b, bd in enumerate(bundle.backdoors):
        part = bd.partition.validate(dataset.num_classes)
        poison_idx = per_class_subsample(y, part.source_classes, poison_fraction, seed, used, tag=f"poison/{b}")
        used = np.concatenate([used, poison_idx])
        cover_idx = per_class_subsample(
            y, part.non_source(dataset.num_classes), cover_fraction, seed, used, tag=f"cover/{b}"
        )
        used = np.concatenate([used, cover_idx])
        for role, idx in ((POISONED, poison_idx), (COVER, cover_idx)):
            if len(idx) == 0:
                continue
            seeds = [derive_seed(seed, "mix", b, int(i)) for i in idx]
            X[idx] = bd.stamp_training(dataset.X[idx], role, seeds)
            roles[idx] = role
            slot[idx] = b
        assigned[poison_idx] = part.target_class

    if spec_hash is None:
        spec_hash = stable_hash({
            "fractions": list(fractions),
            "seed": seed,
            "backdoors": [{"kind": bd.kind, "partition": bd.partition.to_dict(), "trigger": bd.trigger_id,
                           "alpha_train": bd.alpha_train,
                           "mixer": None if bd.mixer is None else bd.mixer.to_dict()} for bd in bundle.backdoors],
        })
    manifest = PoisonManifest(
        roles, y.copy(), assigned, slot, tuple(bd.trigger_id for bd in bundle.backdoors), spec_hash, int(seed)
    )
    merged = LabeledDataset(X, assigned, dataset.num_classes, dataset.class_names)
    return merged, manifest


def craft(dataset: LabeledDataset, spec: AttackSpec):
    """Build the merged (clean + poisoned + cover) training set for one attack."""
    bundle = BackdoorBundle([backdoor_from_spec(spec)])
    return craft_multi(dataset, bundle, (spec.poison_fraction, spec.cover_fraction), spec.seed, spec.spec_hash())


class BackdoorPoisoner(BaseEstimator):
    """Resampler-style wrapper around :func:`craft`.

    ``fit_resample(X, y)`` returns the poisoned ``(X, y)`` and keeps the
    manifest in ``manifest_``.
    """

    def __init__(self, kind="baseline", source_classes=(0,), target_class=1, poison_fraction=0.05,
                 cover_fraction=0.05, trigger=None, alpha_train=0.5, mixer=None, num_classes=None, seed=0):
        self.kind = kind
        self.source_classes = source_classes
        self.target_class = target_class
        self.poison_fraction = poison_fraction
        self.cover_fraction = cover_fraction
        self.trigger = trigger
        self.alpha_train = alpha_train
        self.mixer = mixer
        self.num_classes = num_classes
        self.seed = seed

    def _spec(self):
        return AttackSpec(
            kind=self.kind,
            partition=ClassPartition(self.source_classes, self.target_class),
            poison_fraction=self.poison_fraction,
            cover_fraction=self.cover_fraction,
            trigger=self.trigger,
            alpha_train=self.alpha_train,
            mixer=self.mixer,
            seed=self.seed,
        )

    def fit_resample(self, X, y):
        y = np.asarray(y)
        num_classes = self.num_classes or int(y.max()) + 1
        merged, manifest = craft(LabeledDataset(X, y, num_classes), self._spec())
        self.manifest_ = manifest
        return np.asarray(merged.X), np.asarray(merged.y)
