"""Domain types, class partitioning and deterministic seeding shared by every stage."""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Invalid attack, training or experiment configuration."""


class GeometryError(ValueError):
    """A trigger or crop does not fit the image it is applied to."""


class DependencyError(RuntimeError):
    """A required upstream artifact (trigger, checkpoint, dataset) is missing."""

    def __init__(self, message, artifact=None):
        super().__init__(message)
        self.artifact = artifact


class DegenerateTriggerError(ValueError):
    """A feature trigger has no usable salient region."""


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


# ---------------------------------------------------------------------------
# images and datasets
# ---------------------------------------------------------------------------

def check_images(X, *, copy=False, name="X"):
    """Validate a batch of images (N, H, W, C) with values in [0, 1].

    Returns a float32 array. Raises ``ValueError`` on bad rank, channel count,
    non-finite or out-of-range values.
    """
    X = np.array(X, dtype=np.float32, copy=copy) if copy else np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W, C), got {X.shape}")
    if X.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {X.shape[-1]}")
    if X.size and not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def as_image(data):
    """Construct an immutable ImageTensor (H, W, C) from array-like data.

    2-D input is promoted to a single channel.
    """
    arr = np.array(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {arr.shape}")
    check_images(arr[None], name="image")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images ``X`` (N, H, W, C) in [0, 1] with integer labels ``y`` in [0, num_classes)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    class_names: Optional[tuple] = None

    def __post_init__(self):
        X = check_images(self.X)
        y = np.asarray(self.y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"labels must be 1-D with {len(X)} entries, got shape {y.shape}")
        if len(y) and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        # read-only views: the caller's arrays stay writable
        X = X.view()
        y = y.view()
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    @property
    def image_shape(self):
        return tuple(self.X.shape[1:])

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.num_classes, self.class_names)

    def class_counts(self):
        return np.bincount(self.y, minlength=self.num_classes)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# attack description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPartition:
    source_classes: frozenset
    target_class: int

    def __init__(self, source_classes, target_class):
        object.__setattr__(self, "source_classes", frozenset(int(s) for s in source_classes))
        object.__setattr__(self, "target_class", int(target_class))
        if not self.source_classes:
            raise ConfigurationError("source class set must be nonempty")
        if self.target_class in self.source_classes:
            raise ConfigurationError(f"target class {self.target_class} cannot also be a source class")

    def validate(self, num_classes):
        classes = set(self.source_classes) | {self.target_class}
        bad = sorted(c for c in classes if c < 0 or c >= num_classes)
        if bad:
            raise ConfigurationError(f"partition references classes {bad} outside [0, {num_classes})")
        return self

    def non_source(self, num_classes):
        return sorted(set(range(num_classes)) - set(self.source_classes) - {self.target_class})

    @classmethod
    def first_k(cls, k, target_class, num_classes):
        """Source = the first ``k`` class indices, skipping the target."""
        sources = [c for c in range(num_classes) if c != target_class][:k]
        if len(sources) < k:
            raise ConfigurationError(f"cannot pick {k} source classes from {num_classes} classes")
        return cls(sources, target_class)

    def to_dict(self):
        return {"source_classes": sorted(self.source_classes), "target_class": self.target_class}


ATTACK_KINDS = ("baseline", "cassock1", "cassock2")


@dataclass(frozen=True)
class AttackSpec:
    """Declarative description of one source-specific backdoor attack.

    ``trigger`` is a :class:`~ssba.triggers.PatchTrigger` for ``baseline`` and
    ``cassock1`` and a :class:`~ssba.triggers.FeatureTrigger` for ``cassock2``
    (it may be left ``None`` until the feature trigger has been extracted).
    """

    kind: str
    partition: ClassPartition
    poison_fraction: float = 0.05
    cover_fraction: float = 0.05
    trigger: Any = None
    alpha_train: float = 0.5
    mixer: Any = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        for name in ("poison_fraction", "cover_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1], got {v}")
        if not 0.0 <= self.alpha_train <= 1.0:
            raise ConfigurationError(f"alpha_train must be in [0, 1], got {self.alpha_train}")

    def to_dict(self):
        trig = None if self.trigger is None else self.trigger.metadata()
        mixer = None if self.mixer is None else self.mixer.to_dict()
        return {
            "kind": self.kind,
            "partition": self.partition.to_dict(),
            "poison_fraction": self.poison_fraction,
            "cover_fraction": self.cover_fraction,
            "alpha_train": self.alpha_train,
            "trigger": trig,
            "mixer": mixer,
            "seed": self.seed,
        }

    def spec_hash(self):
        return stable_hash(self.to_dict())


# ---------------------------------------------------------------------------
# hashing and seeding
# ---------------------------------------------------------------------------

def stable_hash(obj, length=16):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:length]


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode())


def derive_seed(seed, *keys):
    """Fan one top-level seed out to an independent per-stage seed.

    ``derive_seed(7, "poison", 3)`` is stable across processes and platforms.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def partition_indices(y, partition, num_classes=None):
    """Split sample indices by role: (source, non-source, target).

    ``y`` may be a label array or a :class:`LabeledDataset`. Indices keep
    dataset order. Samples of other classes (none, for a single target) fall in
    no list.
    """
    if isinstance(y, LabeledDataset):
        num_classes = y.num_classes if num_classes is None else num_classes
        y = y.y
    y = np.asarray(y)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 1
    partition.validate(num_classes)
    src = np.isin(y, sorted(partition.source_classes))
    tgt = y == partition.target_class
    non = ~(src | tgt)
    return np.flatnonzero(src), np.flatnonzero(non), np.flatnonzero(tgt)


def sample_count(n, fraction):
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    # guard against float noise such as 0.07 * 100 = 7.000000000000001
    return min(n, int(math.ceil(fraction * n - 1e-9)))


def seeded_subsample(indices, fraction, seed):
    """Draw ceil(fraction * len) indices without replacement, returned sorted."""
    indices = np.asarray(indices, dtype=np.int64)
    k = sample_count(len(indices), fraction)
    if k == 0:
        return indices[:0].copy()
    rng = make_rng(seed, "subsample")
    return np.sort(rng.choice(indices, size=k, replace=False))


def per_class_subsample(y, classes, fraction, seed, exclude=None, tag=""):
    """Per-class ceil(fraction * population) draws, skipping ``exclude`` indices.

    Counts are based on the full class population; excluded indices are
    removed from the pool before drawing (so draws never collide).
    """
    y = np.asarray(y)
    blocked = np.zeros(len(y), dtype=bool)
    if exclude is not None and len(exclude):
        blocked[np.asarray(exclude, dtype=np.int64)] = True
    picked = []
    for c in sorted(classes):
        members = np.flatnonzero(y == c)
        k = sample_count(len(members), fraction)
        pool = members[~blocked[members]]
        k = min(k, len(pool))
        if k == 0:
            continue
        rng = make_rng(seed, tag, int(c))
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(picked))
