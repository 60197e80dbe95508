"""Extended Neural Cleanse: per class-pair trigger reverse engineering.

For every ordered pair (a -> b) a mask/pattern pair is optimised so that
class-a images stamped with it are classified as b; the L1 norm of each mask
is then scored against the other pairs that share the same target b.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from ..core import check_images, derive_seed, make_rng
from ..models import to_tensor, torch_module

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


def anomaly_indices(norms):
    """Leave-one-out MAD anomaly index of each value, signed so small norms score high.

    index_i = (median(others) - x_i) / (1.4826 * MAD(others)). A zero MAD
    gives +inf for values below the median, 0 otherwise.
    """
    v = np.asarray(norms, dtype=np.float64)
    out = np.zeros(len(v))
    for i in range(len(v)):
        others = np.delete(v, i)
        if len(others) == 0:
            continue
        med = np.median(others)
        mad = np.median(np.abs(others - med))
        dev = med - v[i]
        if mad == 0:
            out[i] = np.inf if dev > 0 else 0.0
        else:
            out[i] = dev / (MAD_CONSISTENCY * mad)
    return out


GROUPINGS = ("target", "source", "global", "two_way")


def _median_polish(M, iters=10):
    """Residuals of an additive row + column fit by alternating median sweeps (NaNs ignored)."""
    R = M.copy()
    for _ in range(iters):
        R -= np.nanmedian(R, axis=1, keepdims=True)
        R -= np.nanmedian(R, axis=0, keepdims=True)
    return R


def pair_anomaly_scores(norms, n_classes, grouping="target"):
    """Anomaly index of every scored pair under one of :data:`GROUPINGS`.

    ``target`` compares pairs sharing a target, ``source`` pairs sharing a
    source, ``global`` all pairs together. ``two_way`` removes per-source and
    per-target effects from the log-norms first and scores the residuals globally.
    Groups with fewer than 3 pairs are not scored.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    if grouping == "two_way":
        M = np.full((n_classes, n_classes), np.nan)
        for (a, b), v in norms.items():
            M[a, b] = np.log(max(v, 1e-12))
        R = _median_polish(M)
        values = {p: R[p] for p in norms}
        groups = [list(norms)]
    else:
        values = norms
        if grouping == "target":
            groups = [[(a, b) for a in range(n_classes) if (a, b) in norms] for b in range(n_classes)]
        elif grouping == "source":
            groups = [[(a, b) for b in range(n_classes) if (a, b) in norms] for a in range(n_classes)]
        else:
            groups = [list(norms)]
    scores = {}
    for pairs in groups:
        if len(pairs) < 3:
            continue
        for p, s in zip(pairs, anomaly_indices([values[p] for p in pairs])):
            scores[p] = float(s)
    return scores


@dataclass
class ReversedTrigger:
    source: int
    target: int
    mask: np.ndarray
    pattern: np.ndarray
    norm: float
    flip_rate: float = float("nan")


@dataclass
class DetectionVerdict:
    infected: bool
    scores: dict
    flagged: list
    norms: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def to_dict(self):
        key = lambda p: f"{p[0]}->{p[1]}"
        return {
            "infected": bool(self.infected),
            "flagged": [key(p) for p in self.flagged],
            "anomaly_index": {key(p): float(s) for p, s in self.scores.items()},
            "norms": {key(p): float(n) for p, n in self.norms.items()},
            "skipped": [key(p) for p in self.skipped],
        }


class ExtendedNeuralCleanse(BaseEstimator):
    """Model diagnosis over all N(N-1) ordered class pairs.

    Parameters
    ----------
    steps : int
        Optimiser steps per class pair.
    lam : float
        L1 weight on the mask.
    n_samples : int
        Clean images of the source class used per pair.
    threshold : float
        Anomaly index above which a pair is flagged.
    grouping : str
        Which pairs a norm is compared against; see :func:`pair_anomaly_scores`.
    """

    def __init__(self, steps=100, lam=1e-2, lr=0.1, n_samples=20, threshold=2.0, grouping="target", seed=0):
        self.steps = steps
        self.lam = lam
        self.lr = lr
        self.n_samples = n_samples
        self.threshold = threshold
        self.grouping = grouping
        self.seed = seed

    def _reverse_source(self, module, x, source, targets, gen):
        k = len(targets)
        n, C, H, W = x.shape
        mask_raw = (torch.randn((k, 1, H, W), generator=gen) * 0.1).requires_grad_(True)
        pat_raw = (torch.randn((k, C, H, W), generator=gen) * 0.1).requires_grad_(True)
        opt = torch.optim.Adam([mask_raw, pat_raw], lr=self.lr, betas=(0.5, 0.9))
        tgt = torch.as_tensor(np.repeat(targets, n))
        xs = x.unsqueeze(0)
        self.box_violations_ = getattr(self, "box_violations_", 0)
        for _ in range(self.steps):
            mask = (torch.tanh(mask_raw) + 1) / 2
            pattern = (torch.tanh(pat_raw) + 1) / 2
            stamped = (1 - mask.unsqueeze(1)) * xs + (mask * pattern).unsqueeze(1)
            logits = module(stamped.reshape(k * n, C, H, W))
            ce = F.cross_entropy(logits, tgt, reduction="none").reshape(k, n).mean(dim=1)
            l1 = mask.abs().sum(dim=(1, 2, 3))
            loss = (ce + self.lam * l1).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if float(mask.detach().min()) < 0 or float(mask.detach().max()) > 1:
                self.box_violations_ += 1
        with torch.no_grad():
            mask = (torch.tanh(mask_raw) + 1) / 2
            pattern = (torch.tanh(pat_raw) + 1) / 2
            stamped = (1 - mask.unsqueeze(1)) * xs + (mask * pattern).unsqueeze(1)
            pred = module(stamped.reshape(k * n, C, H, W)).argmax(1).reshape(k, n)
            flips = (pred == torch.as_tensor(targets)[:, None]).double().mean(dim=1)
        out = []
        for j, b in enumerate(targets):
            m = mask[j, 0].numpy()
            out.append(ReversedTrigger(int(source), int(b), m, pattern[j].numpy().transpose(1, 2, 0),
                                       float(np.abs(m).sum()), float(flips[j])))
        return out

    def fit(self, model, X, y):
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}, got {self.grouping!r}")
        module = torch_module(model)
        X = check_images(X)
        y = np.asarray(y)
        classes = np.unique(y)
        n_classes = getattr(model, "classes_", classes)
        n_classes = len(n_classes)
        missing = sorted(set(range(n_classes)) - set(classes.tolist()))
        if missing:
            raise ValueError(f"clean set lacks samples of classes {missing}")
        was_training = module.training
        module.eval()
        flags = [p.requires_grad for p in module.parameters()]
        for p in module.parameters():
            p.requires_grad_(False)
        rng = make_rng(self.seed, "nc-samples")
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "nc-init"))
        self.triggers_ = {}
        self.skipped_ = []
        self.box_violations_ = 0
        try:
            for a in range(n_classes):
                members = np.flatnonzero(y == a)
                pick = rng.choice(members, size=min(self.n_samples, len(members)), replace=False)
                x = to_tensor(X[np.sort(pick)])
                targets = [b for b in range(n_classes) if b != a]
                for rt in self._reverse_source(module, x, a, targets, gen):
                    if not np.isfinite(rt.norm):
                        self.skipped_.append((rt.source, rt.target))
                        continue
                    self.triggers_[(rt.source, rt.target)] = rt
        finally:
            for p, f in zip(module.parameters(), flags):
                p.requires_grad_(f)
            module.train(was_training)

        norms = {pair: rt.norm for pair, rt in self.triggers_.items()}
        scores = pair_anomaly_scores(norms, n_classes, self.grouping)
        flagged = [p for p, s in scores.items() if s > self.threshold]
        self.norms_ = norms
        self.scores_ = scores
        self.flagged_pairs_ = sorted(flagged)
        self.infected_ = bool(flagged)
        self.verdict_ = DetectionVerdict(self.infected_, scores, self.flagged_pairs_, norms, self.skipped_)
        return self


def extended_neural_cleanse(handle, clean_set, **params):
    """Functional wrapper returning a :class:`DetectionVerdict`."""
    return ExtendedNeuralCleanse(**params).fit(handle, clean_set.X, clean_set.y).verdict_
