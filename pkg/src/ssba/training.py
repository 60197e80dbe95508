"""Clean and backdoor training behind a scikit-learn classifier interface.

Two objectives are supported:

* ``"Lp"``: cross-entropy over every record (poisoned records carry the target
  label, cover/clean records their ground truth).
* ``"Lc"``: ``Lp + gamma * SIM`` where SIM is a margin-based pairwise
  contrastive loss on L2-normalised penultimate embeddings, computed over the
  records of each batch whose (assigned) label lies in the source classes or
  the target class.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import ConfigurationError, LabeledDataset, TrainingError, check_images, derive_seed, stable_hash
from .models import ModelSpec, build_model, to_tensor, trainable_layers

logger = logging.getLogger(__name__)


def pairwise_contrastive_loss(z, labels, margin=1.0, normalize=True, eps=1e-12):
    """Mean over pairs i < j of d^2 (same label) or max(0, margin - d)^2 (different label)."""
    if normalize:
        z = F.normalize(z, dim=1)
    n = z.shape[0]
    if n < 2:
        return z.sum() * 0.0
    iu, ju = torch.triu_indices(n, n, offset=1)
    diff = z[iu] - z[ju]
    d2 = (diff * diff).sum(dim=1)
    d = torch.sqrt(d2 + eps)
    same = (labels[iu] == labels[ju]).to(z.dtype)
    loss = same * d2 + (1.0 - same) * F.relu(margin - d) ** 2
    return loss.mean()


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    gamma: float = 0.1
    margin: float = 1.0
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self):
        return asdict(self)


class BackdoorClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier trained by SGD on (N, H, W, C) arrays.

    ``contrastive_classes`` lists the labels whose samples enter the SIM term
    when ``objective="Lc"``.
    """

    def __init__(self, arch="mnist_cnn", width=16, epochs=5, batch_size=64, lr=0.01, momentum=0.9,
                 weight_decay=0.0, lr_schedule="constant", objective="Lp", gamma=0.1, margin=1.0,
                 contrastive_classes=None, num_classes=None, seed=0, verbose=False):
        self.arch = arch
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.objective = objective
        self.gamma = gamma
        self.margin = margin
        self.contrastive_classes = contrastive_classes
        self.num_classes = num_classes
        self.seed = seed
        self.verbose = verbose

    # -- fitting -----------------------------------------------------------

    def _init_model(self, input_shape, n_classes):
        self.model_spec_ = ModelSpec(self.arch, tuple(input_shape), int(n_classes), self.width)
        torch.manual_seed(derive_seed(self.seed, "init"))
        self.model_ = build_model(self.model_spec_)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = int(np.prod(input_shape))
        self.input_shape_ = tuple(int(s) for s in input_shape)

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        if self.objective not in ("Lp", "Lc"):
            raise ConfigurationError(f"objective must be 'Lp' or 'Lc', got {self.objective!r}")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        n_classes = self.num_classes or int(y.max()) + 1
        self._init_model(X.shape[1:], n_classes)

        use_sim = self.objective == "Lc"
        sim_classes = None
        if use_sim:
            if not self.contrastive_classes:
                raise ConfigurationError("objective 'Lc' needs contrastive_classes (source classes + target)")
            sim_classes = torch.as_tensor(sorted(self.contrastive_classes))
            if not np.isin(y, sorted(self.contrastive_classes)).any():
                raise ConfigurationError("no training record carries a source or target label; SIM is empty")

        model = self.model_
        opt = torch.optim.SGD(model.parameters(), lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        steps_per_epoch = max(1, math.ceil(len(X) / self.batch_size))
        total = steps_per_epoch * max(self.epochs, 1)
        sched = None
        if self.lr_schedule == "cosine":
            sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)

        torch.manual_seed(derive_seed(self.seed, "dropout"))
        y_t = torch.from_numpy(np.array(y, dtype=np.int64))
        self.loss_history_ = []
        self.sim_history_ = []
        self.batch_losses_ = []
        t0 = time.perf_counter()
        for epoch in range(self.epochs):
            model.train()
            perm = np.random.default_rng(derive_seed(self.seed, "shuffle", epoch)).permutation(len(X))
            tot, tot_sim, seen = 0.0, 0.0, 0
            for start in range(0, len(X), self.batch_size):
                idx = perm[start:start + self.batch_size]
                xb = to_tensor(X[idx])
                yb = y_t[idx]
                logits, z = model(xb, return_embedding=True)
                loss = F.cross_entropy(logits, yb)
                sim_val = 0.0
                if use_sim:
                    sel = torch.isin(yb, sim_classes)
                    if int(sel.sum()) >= 2:
                        sim = pairwise_contrastive_loss(z[sel], yb[sel], self.margin)
                        loss = loss + self.gamma * sim
                        sim_val = float(sim.detach())
                if not torch.isfinite(loss):
                    raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if sched is not None:
                    sched.step()
                lv = float(loss.detach())
                self.batch_losses_.append(lv)
                tot += lv * len(idx)
                tot_sim += sim_val * len(idx)
                seen += len(idx)
            self.loss_history_.append(tot / seen)
            self.sim_history_.append(tot_sim / seen)
            if self.verbose:
                logger.info("epoch %d/%d loss %.4f", epoch + 1, self.epochs, tot / seen)
        self.fit_time_ = time.perf_counter() - t0
        model.eval()
        return self

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def _forward(self, X, batch_size=512, embed=False):
        check_is_fitted(self, "model_")
        X = check_images(X)
        if tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"expected images of shape {self.input_shape_}, got {X.shape[1:]}")
        self.model_.eval()
        out = []
        for i in range(0, len(X), batch_size):
            xb = to_tensor(X[i:i + batch_size])
            out.append(self.model_.embed(xb) if embed else self.model_(xb))
        if not out:
            width = self.model_.fc2.in_features if embed else len(self.classes_)
            return torch.empty(0, width)
        return torch.cat(out)

    def decision_function(self, X):
        return self._forward(X).numpy()

    def predict_proba(self, X):
        p = torch.softmax(self._forward(X).double(), dim=1).numpy()
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self._forward(X).argmax(dim=1).numpy()

    def embed(self, X):
        """Penultimate-layer embeddings."""
        return self._forward(X, embed=True).numpy()

    # -- persistence -------------------------------------------------------

    def save(self, path, **metadata):
        check_is_fitted(self, "model_")
        payload = {
            "params": self.get_params(),
            "model_spec": asdict(self.model_spec_),
            "state_dict": self.model_.state_dict(),
            "loss_history": list(getattr(self, "loss_history_", [])),
            "metadata": metadata,
        }
        torch.save(payload, Path(path))

    @classmethod
    def load(cls, path):
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        clf = cls(**payload["params"])
        spec = payload["model_spec"]
        clf.model_spec_ = ModelSpec(spec["arch"], tuple(spec["input_shape"]), spec["num_classes"], spec["width"])
        clf.model_ = build_model(clf.model_spec_)
        clf.model_.load_state_dict(payload["state_dict"])
        clf.model_.eval()
        clf.classes_ = np.arange(spec["num_classes"])
        clf.input_shape_ = tuple(spec["input_shape"])
        clf.n_features_in_ = int(np.prod(clf.input_shape_))
        clf.loss_history_ = payload.get("loss_history", [])
        clf.checkpoint_metadata_ = payload.get("metadata", {})
        return clf


def parameter_checksum(module):
    """sha-based digest of every parameter and buffer, keyed by name."""
    import hashlib

    out = {}
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        out[name] = hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()[:16]
    return out


def _classifier(model_spec, config, **extra):
    return BackdoorClassifier(
        arch=model_spec.arch,
        width=model_spec.width,
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        lr_schedule=config.lr_schedule,
        gamma=config.gamma,
        margin=config.margin,
        num_classes=model_spec.num_classes,
        seed=config.seed,
        **extra,
    )


def _check_shapes(dataset, model_spec):
    if tuple(dataset.image_shape) != tuple(model_spec.input_shape):
        raise ConfigurationError(f"dataset images {dataset.image_shape} do not match model input {model_spec.input_shape}")
    if dataset.num_classes != model_spec.num_classes:
        raise ConfigurationError("dataset and model disagree on the number of classes")


def train_clean(dataset: LabeledDataset, model_spec: ModelSpec, config: TrainConfig):
    _check_shapes(dataset, model_spec)
    return _classifier(model_spec, config, objective="Lp").fit(dataset.X, dataset.y)


def train_backdoor(merged: LabeledDataset, manifest, model_spec: ModelSpec, config: TrainConfig,
                   objective="Lp", contrastive_classes=None):
    """Train on a crafted set. For ``Lc`` the contrastive classes default to S + T of the manifest."""
    _check_shapes(merged, model_spec)
    if manifest is not None:
        if len(manifest) != len(merged):
            raise ConfigurationError("manifest is not aligned with the merged dataset")
        if not np.array_equal(manifest.assigned_labels, merged.y):
            raise ConfigurationError("manifest labels disagree with the merged dataset")
    if objective == "Lc" and contrastive_classes is None:
        if manifest is None:
            raise ConfigurationError("Lc needs either a manifest or explicit contrastive_classes")
        poisoned = manifest.roles == 1
        contrastive_classes = sorted(set(manifest.original_labels[poisoned].tolist())
                                     | set(manifest.assigned_labels[poisoned].tolist()))
    clf = _classifier(model_spec, config, objective=objective, contrastive_classes=contrastive_classes)
    return clf.fit(merged.X, merged.y)


def fine_tune(handle, X, y, layers_to_tune=4, epochs=10, lr=0.01, momentum=0.9, batch_size=64, seed=0):
    """Fine-tune only the last ``layers_to_tune`` conv/linear layers on clean data.

    Returns a new classifier; ``handle`` is left untouched. Frozen layers
    (including their batch-norm statistics) stay bit-identical.
    """
    check_is_fitted(handle, "model_")
    X = check_images(X)
    y = np.asarray(y, dtype=np.int64)
    new = copy.deepcopy(handle)
    model = new.model_
    layers = trainable_layers(model)
    if not 1 <= layers_to_tune <= len(layers):
        raise ConfigurationError(f"layers_to_tune must be in [1, {len(layers)}], got {layers_to_tune}")
    new.fine_tune_history_ = []
    if epochs == 0:
        return new
    tuned = set(id(m) for m in layers[-layers_to_tune:])

    # batch-norm modules follow the tunable status of the conv they normalise
    train_modules, current = [], False
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            current = id(m) in tuned
            if current:
                train_modules.append(m)
        elif isinstance(m, nn.modules.batchnorm._BatchNorm) and current:
            train_modules.append(m)
    params = [p for m in train_modules for p in m.parameters(recurse=False)]
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)

    # the fully frozen prefix of the trunk is evaluated once and cached
    children = list(model.features.children())
    first = len(children)
    for k, child in enumerate(children):
        if any(id(m) in tuned for m in child.modules()):
            first = k
            break
    prefix = nn.Sequential(*children[:first])
    suffix = nn.Sequential(*children[first:])

    model.eval()
    with torch.no_grad():
        cached = torch.cat([prefix(to_tensor(X[i:i + 512])) for i in range(0, len(X), 512)])

    def set_modes():
        model.eval()
        for m in train_modules:
            m.train()

    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    torch.manual_seed(derive_seed(seed, "finetune"))
    y_t = torch.from_numpy(np.array(y, dtype=np.int64))
    for epoch in range(epochs):
        set_modes()
        perm = np.random.default_rng(derive_seed(seed, "ft-shuffle", epoch)).permutation(len(X))
        tot = 0.0
        for start in range(0, len(X), batch_size):
            idx = torch.from_numpy(perm[start:start + batch_size])
            h = suffix(cached[idx])
            z = F.relu(model.fc1(torch.flatten(h, 1)))
            logits = model.fc2(model.drop(z))
            loss = F.cross_entropy(logits, y_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"fine-tuning loss became non-finite in epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
        new.fine_tune_history_.append(tot / len(X))
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return new
