"""Trigger families: transparency-blended patch triggers and target-class feature triggers.

Patch triggers blend a small pattern into a fixed location::

    out[region] = alpha * pattern + (1 - alpha) * image[region]

Feature triggers are masks over target-class images found by optimising

    sum_i CE(F(mask * x_i + (1 - mask) * noise), target) + lam * ||mask||_1

with fresh Gaussian noise every step and projection onto [0, 1]. The salient
content is composited into other samples by a mixer (half-concat or
crop-and-paste).
"""
from __future__ import annotations

import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning

from .core import (
    ConfigurationError,
    DegenerateTriggerError,
    GeometryError,
    LabeledDataset,
    as_image,
    check_images,
    derive_seed,
    make_rng,
)
from .models import to_tensor, torch_module


def _array_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# patch triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatchTrigger:
    pattern: np.ndarray
    location: tuple
    alpha: float = 1.0

    def __post_init__(self):
        pattern = as_image(self.pattern)
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "location", (int(self.location[0]), int(self.location[1])))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")

    kind = "patch"

    @property
    def size(self):
        return self.pattern.shape[:2]

    def region(self):
        r, c = self.location
        h, w = self.size
        return slice(r, r + h), slice(c, c + w)

    def check_fits(self, image_shape):
        H, W, C = image_shape
        r, c = self.location
        h, w, pc = self.pattern.shape
        if pc != C:
            raise GeometryError(f"pattern has {pc} channels, image has {C}")
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise GeometryError(f"{h}x{w} patch at {self.location} does not fit a {H}x{W} image")

    def with_alpha(self, alpha):
        return replace(self, alpha=float(alpha))

    def content_hash(self):
        return _array_hash(self.pattern, np.asarray(self.location))

    def metadata(self):
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "location": list(self.location),
            "pattern_shape": list(self.pattern.shape),
            "content_hash": self.content_hash(),
        }


CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


def corner_anchor(corner, image_hw, patch_hw, margin=0):
    H, W = image_hw
    h, w = patch_hw
    row = margin if corner.startswith("top") else H - h - margin
    col = margin if corner.endswith("left") else W - w - margin
    return row, col


def make_patch_trigger(image_shape, area_fraction=0.02, corner="bottom_right", pattern="white",
                       margin=1, alpha=1.0, seed=0):
    """Square trigger whose side makes it cover ``area_fraction`` of the image.

    ``pattern`` is ``"white"``, ``"checker"`` or ``"random"`` (seeded binary noise).
    """
    H, W, C = image_shape
    if not 0.01 <= area_fraction <= 0.05:
        raise ConfigurationError(f"trigger area fraction must be within [0.01, 0.05], got {area_fraction}")
    side = max(1, int(round(np.sqrt(area_fraction * H * W))))
    # rounding can leave the [1%, 5%] band on tiny images
    while side * side > 0.05 * H * W and side > 1:
        side -= 1
    while side * side < 0.01 * H * W:
        side += 1
    if corner not in CORNERS:
        raise ConfigurationError(f"corner must be one of {CORNERS}")
    if pattern == "white":
        pat = np.ones((side, side, C), dtype=np.float32)
    elif pattern == "checker":
        grid = (np.add.outer(np.arange(side), np.arange(side)) % 2).astype(np.float32)
        pat = np.repeat(grid[:, :, None], C, axis=2)
    elif pattern == "random":
        pat = make_rng(seed, "pattern").integers(0, 2, size=(side, side, C)).astype(np.float32)
    else:
        raise ConfigurationError(f"unknown pattern {pattern!r}")
    loc = corner_anchor(corner, (H, W), (side, side), margin)
    trig = PatchTrigger(pat, loc, alpha)
    trig.check_fits(image_shape)
    return trig


def apply_patch(image, trigger, alpha=None):
    """Blend ``trigger`` into one (H, W, C) image; pixels outside the patch are untouched."""
    image = np.asarray(image, dtype=np.float32)
    return apply_patch_batch(image[None], trigger, alpha)[0]


def apply_patch_batch(X, trigger, alpha=None):
    X = check_images(X)
    trigger.check_fits(X.shape[1:])
    a = np.float32(trigger.alpha if alpha is None else alpha)
    out = X.copy()
    rs, cs = trigger.region()
    out[:, rs, cs, :] = a * trigger.pattern + (np.float32(1.0) - a) * X[:, rs, cs, :]
    np.clip(out, 0.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------------------
# feature triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureTrigger:
    mask: np.ndarray
    donors: np.ndarray
    target_class: int
    extraction_params: dict = field(default_factory=dict)

    kind = "feature"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float32)
        if mask.ndim != 3 or not np.isfinite(mask).all() or mask.min() < 0 or mask.max() > 1:
            raise ValueError("mask must be a finite (H, W, C) array in [0, 1]")
        donors = check_images(self.donors, name="donors")
        if len(donors) == 0:
            raise ValueError("feature trigger needs at least one donor image")
        if donors.shape[1:] != mask.shape:
            raise GeometryError(f"mask shape {mask.shape} differs from donor shape {donors.shape[1:]}")
        mask.setflags(write=False)
        donors.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "donors", donors)
        object.__setattr__(self, "target_class", int(self.target_class))

    def content_hash(self):
        return _array_hash(self.mask, self.donors, np.asarray([self.target_class]))

    def metadata(self):
        return {
            "kind": self.kind,
            "target_class": self.target_class,
            "n_donors": int(len(self.donors)),
            "mask_l1": float(self.mask.sum()),
            "extraction_params": dict(self.extraction_params),
            "content_hash": self.content_hash(),
        }


def select_donors(model, dataset, target_class, n=10, confidence_floor=0.9, batch_size=512):
    """Pick the ``n`` target-class images the model is most confident about."""
    module = torch_module(model)
    idx = np.flatnonzero(dataset.y == target_class)
    if len(idx) == 0:
        raise ConfigurationError(f"no samples of class {target_class} to draw donors from")
    probs = predict_proba_module(module, dataset.X[idx], batch_size)[:, target_class]
    order = np.argsort(-probs, kind="stable")[:n]
    keep = order[probs[order] >= confidence_floor]
    if len(keep) == 0:
        raise ConfigurationError(
            f"no class-{target_class} image reaches confidence {confidence_floor} (max {probs.max():.3f})"
        )
    return dataset.subset(idx[keep]), probs[keep]


@torch.no_grad()
def predict_proba_module(module, X, batch_size=512):
    was_training = module.training
    module.eval()
    out = []
    for i in range(0, len(X), batch_size):
        out.append(torch.softmax(module(to_tensor(X[i:i + batch_size])).double(), dim=1).numpy())
    module.train(was_training)
    return np.concatenate(out) if out else np.empty((0, 0))


class FeatureTriggerExtractor(BaseEstimator):
    """Recover the salient region of a target class by mask optimisation.

    Parameters
    ----------
    lam : float
        Weight of the L1 penalty on the mask.
    noise_sigma : float
        Standard deviation of the Gaussian fill behind the mask.
    steps, lr : int, float
        Projected gradient descent budget.
    patience : int
        Steps without improvement of the tracked objective before stopping
        with a :class:`~sklearn.exceptions.ConvergenceWarning`.
    mask_init : float
        Starting value of every mask entry.
    eval_every : int
        Interval at which the objective is re-scored on a fixed noise draw to
        keep the best mask so far.
    """

    def __init__(self, lam=1e-3, noise_sigma=0.1, steps=500, lr=0.1, patience=200, mask_init=0.0,
                 eval_every=10, seed=0):
        self.lam = lam
        self.noise_sigma = noise_sigma
        self.steps = steps
        self.lr = lr
        self.patience = patience
        self.mask_init = mask_init
        self.eval_every = eval_every
        self.seed = seed

    def _objective(self, module, x, mask, noise, target, with_penalty=True):
        comp = mask * x + (1.0 - mask) * noise
        logits = module(comp)
        tgt = torch.full((len(x),), target, dtype=torch.long)
        ce = F.cross_entropy(logits, tgt, reduction="sum")
        return ce + self.lam * mask.abs().sum() if with_penalty else ce

    def fit(self, model, X, target_class):
        module = torch_module(model)
        X = check_images(X, name="donors")
        if not 0 <= self.mask_init <= 1:
            raise ConfigurationError("mask_init must be in [0, 1]")
        was_training = module.training
        module.eval()
        params = [p for p in module.parameters()]
        grad_flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(False)

        gen = torch.Generator().manual_seed(derive_seed(self.seed, "extract"))
        x = to_tensor(X)
        mask = torch.full(x.shape[1:], float(self.mask_init), requires_grad=True)
        eval_noise = torch.randn(x.shape, generator=gen) * self.noise_sigma

        def score(m):
            with torch.no_grad():
                return float(self._objective(module, x, m, eval_noise, target_class))

        try:
            best = score(mask)
            self.initial_objective_ = best
            best_mask = mask.detach().clone()
            history, stale, converged = [best], 0, True
            for step in range(1, self.steps + 1):
                noise = torch.randn(x.shape, generator=gen) * self.noise_sigma
                loss = self._objective(module, x, mask, noise, target_class, with_penalty=False)
                (grad,) = torch.autograd.grad(loss, mask)
                with torch.no_grad():
                    # proximal step for the L1 term; the mask is nonnegative so it is a shift
                    mask -= self.lr * (grad + self.lam)
                    mask.clamp_(0.0, 1.0)
                if step % self.eval_every == 0 or step == self.steps:
                    val = score(mask)
                    history.append(val)
                    if val < best:
                        best, best_mask, stale = val, mask.detach().clone(), 0
                    else:
                        stale += self.eval_every
                    if stale >= self.patience:
                        converged = False
                        break
        finally:
            for p, flag in zip(params, grad_flags):
                p.requires_grad_(flag)
            module.train(was_training)

        if not converged or best >= self.initial_objective_:
            warnings.warn(
                f"mask objective stopped improving (best {best:.4f}); returning best-so-far mask",
                ConvergenceWarning,
            )
        self.mask_ = best_mask.numpy().transpose(1, 2, 0).copy()
        self.final_objective_ = best
        self.objective_history_ = np.asarray(history)
        self.n_steps_ = step if self.steps else 0
        self.target_class_ = int(target_class)
        self.donors_ = X
        return self

    def to_trigger(self):
        params = {k: getattr(self, k) for k in ("lam", "noise_sigma", "steps", "lr", "mask_init", "seed")}
        return FeatureTrigger(self.mask_, self.donors_, self.target_class_, params)


def extract_feature_trigger(model, donors, lam=1e-3, noise_sigma=0.1, steps=500, lr=0.1, seed=0, **kw):
    """Functional wrapper: donors is a LabeledDataset whose labels are all the target class."""
    labels = np.unique(donors.y)
    if len(labels) != 1:
        raise ConfigurationError(f"donors must all carry the target label, found {labels.tolist()}")
    ext = FeatureTriggerExtractor(lam=lam, noise_sigma=noise_sigma, steps=steps, lr=lr, seed=seed, **kw)
    return ext.fit(model, donors.X, int(labels[0])).to_trigger()


# ---------------------------------------------------------------------------
# mixers
# ---------------------------------------------------------------------------

MIXERS = ("half_concat", "crop_and_paste")


@dataclass(frozen=True)
class MixerConfig:
    """How a sample is composited with feature-trigger content.

    half_concat keeps the sample's left (``vertical``) or top (``horizontal``)
    half and fills the rest with a masked donor. crop_and_paste pastes the
    donor crop around the mask's top-quantile region into ``corner``.
    ``"random"`` for orientation/corner draws one per call.
    """

    kind: str = "half_concat"
    orientation: str = "vertical"
    corner: str = "bottom_right"
    quantile: float = 0.9
    min_overlap: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MIXERS:
            raise ConfigurationError(f"unknown mixer {self.kind!r}; expected one of {MIXERS}")
        if self.orientation not in ("vertical", "horizontal", "random"):
            raise ConfigurationError(f"bad orientation {self.orientation!r}")
        if self.corner not in CORNERS + ("random",):
            raise ConfigurationError(f"bad corner {self.corner!r}")
        if not 0.0 < self.min_overlap <= 0.5:
            raise ConfigurationError("min_overlap must be in (0, 0.5]")
        if not 0.0 <= self.quantile < 1.0:
            raise ConfigurationError("quantile must be in [0, 1)")

    def to_dict(self):
        return dict(self.__dict__)


def salient_box(mask, quantile=0.9, min_fraction=0.25, max_fraction=0.75):
    """Bounding box (r0, r1, c0, c1) of the mask's top-quantile region.

    The box is grown or shrunk about its mass centre so that its area stays
    within [min_fraction, max_fraction] of the image.
    """
    m = np.asarray(mask, dtype=np.float64)
    m2 = m.mean(axis=2) if m.ndim == 3 else m
    H, W = m2.shape
    if m2.max() <= 0:
        raise DegenerateTriggerError("mask has no positive entries")
    thr = np.quantile(m2, quantile)
    sel = (m2 >= thr) & (m2 > 0)
    rows, cols = np.nonzero(sel)
    if len(rows) == 0:
        raise DegenerateTriggerError("top-quantile region of the mask is empty")
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    wts = m2[sel]
    cr, cc = np.average(rows + 0.5, weights=wts), np.average(cols + 0.5, weights=wts)
    h, w = r1 - r0, c1 - c0
    area = H * W
    lo, hi = int(np.ceil(min_fraction * area)), int(np.floor(max_fraction * area))
    if h * w < lo:
        scale = np.sqrt(lo / (h * w))
        h, w = min(H, int(np.ceil(h * scale))), min(W, int(np.ceil(w * scale)))
        while h * w < lo:
            if h < H:
                h += 1
            else:
                w += 1
    elif h * w > hi:
        scale = np.sqrt(hi / (h * w))
        h, w = max(1, int(np.floor(h * scale))), max(1, int(np.floor(w * scale)))
        while h * w > hi:
            if h >= w:
                h -= 1
            else:
                w -= 1
    else:
        return int(r0), int(r1), int(c0), int(c1)
    r0 = int(np.clip(round(cr - h / 2), 0, H - h))
    c0 = int(np.clip(round(cc - w / 2), 0, W - w))
    return r0, r0 + h, c0, c0 + w


def mix(sample, trigger, config, seed=None):
    """Composite one (H, W, C) sample with feature-trigger content.

    ``seed`` selects the donor (and orientation/corner when randomised);
    defaults to ``config.seed``.
    """
    sample = np.asarray(sample, dtype=np.float32)
    out, _ = _mix_one(sample, trigger, config, config.seed if seed is None else seed)
    return out


def mix_with_mask(sample, trigger, config, seed=None):
    """Like :func:`mix` but also returns the boolean (H, W) map of donor-owned pixels."""
    sample = np.asarray(sample, dtype=np.float32)
    return _mix_one(sample, trigger, config, config.seed if seed is None else seed)


def _mix_one(sample, trigger, config, seed):
    if sample.shape != trigger.mask.shape:
        raise GeometryError(f"sample shape {sample.shape} incompatible with trigger mask {trigger.mask.shape}")
    H, W, _ = sample.shape
    rng = np.random.default_rng(derive_seed(seed, "mix"))
    donor = trigger.donors[rng.integers(len(trigger.donors))]
    owned = np.zeros((H, W), dtype=bool)
    if config.kind == "half_concat":
        orient = config.orientation
        if orient == "random":
            orient = ("vertical", "horizontal")[rng.integers(2)]
        if orient == "vertical":
            owned[:, W // 2:] = True
        else:
            owned[H // 2:, :] = True
        out = sample.copy()
        composite = trigger.mask * donor
        out[owned] = composite[owned]
    else:
        corner = config.corner
        if corner == "random":
            corner = CORNERS[rng.integers(len(CORNERS))]
        r0, r1, c0, c1 = salient_box(trigger.mask, config.quantile, config.min_overlap, 1.0 - config.min_overlap)
        h, w = r1 - r0, c1 - c0
        pr, pc = corner_anchor(corner, (H, W), (h, w))
        out = sample.copy()
        out[pr:pr + h, pc:pc + w] = donor[r0:r1, c0:c1]
        owned[pr:pr + h, pc:pc + w] = True
    np.clip(out, 0.0, 1.0, out=out)
    return out, owned


def mix_batch(X, trigger, config, seeds):
    X = check_images(X)
    if len(seeds) != len(X):
        raise ValueError("need one seed per sample")
    out = np.empty_like(X)
    for i, s in enumerate(seeds):
        out[i], _ = _mix_one(X[i], trigger, config, int(s))
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def trigger_to_blob(trigger):
    """Serialise a trigger to ``(npz bytes, metadata dict)``."""
    buf = io.BytesIO()
    if isinstance(trigger, PatchTrigger):
        np.savez(buf, pattern=trigger.pattern, location=np.asarray(trigger.location), alpha=trigger.alpha)
    elif isinstance(trigger, FeatureTrigger):
        np.savez(buf, mask=trigger.mask, donors=trigger.donors, target_class=trigger.target_class)
    else:
        raise TypeError(f"cannot serialise {type(trigger).__name__}")
    return buf.getvalue(), trigger.metadata()


def trigger_from_blob(blob, metadata):
    with np.load(io.BytesIO(blob)) as z:
        if metadata["kind"] == "patch":
            trig = PatchTrigger(z["pattern"], tuple(z["location"].tolist()), float(z["alpha"]))
        else:
            trig = FeatureTrigger(z["mask"], z["donors"], int(z["target_class"]),
                                  metadata.get("extraction_params", {}))
    if trig.content_hash() != metadata["content_hash"]:
        raise ValueError("trigger blob does not match its recorded content hash")
    return trig


def save_trigger(trigger, path):
    path = Path(path)
    blob, meta = trigger_to_blob(trigger)
    path.with_suffix(".npz").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_trigger(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return trigger_from_blob(path.with_suffix(".npz").read_bytes(), meta)
