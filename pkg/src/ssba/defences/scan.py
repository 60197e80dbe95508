"""Training-set inspection for classes that contain more than one identity.

Simplified identity/variation test: per class, compare a one-component and a
two-component Gaussian mixture on (PCA-reduced) representations. The
per-sample log-likelihood gain on the training class is offset by the gain the
same class shows on the defender's clean data; a class whose offset gain is a
robust upper outlier among all classes is flagged, and the samples of its
minority mixture component are returned as suspects.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.decomposition import PCA
from sklearn.mixture import GaussianMixture

from ..core import derive_seed

MAD_CONSISTENCY = 1.4826


def mixture_gain(Z, seed=0, reg_covar=1e-4):
    """Mean per-sample log-likelihood of a 2-component GMM minus that of a single Gaussian."""
    g1 = GaussianMixture(1, covariance_type="full", reg_covar=reg_covar, random_state=seed).fit(Z)
    g2 = GaussianMixture(2, covariance_type="full", reg_covar=reg_covar, n_init=3, random_state=seed).fit(Z)
    return float(g2.score(Z) - g1.score(Z)), g2


class ScanStyleDetector(BaseEstimator):
    """Flag classes whose representations split into two populations.

    ``fit(Z, y, Z_clean, y_clean)`` takes training-set representations and a
    small clean reference set. Results: ``flagged_classes_``,
    ``suspect_indices_`` (class -> indices into ``Z``), ``gain_``,
    ``reference_gain_`` and ``anomaly_``.
    """

    def __init__(self, n_components=10, min_class_size=20, max_per_class=None, threshold=3.0, seed=0):
        self.n_components = n_components
        self.min_class_size = min_class_size
        self.max_per_class = max_per_class
        self.threshold = threshold
        self.seed = seed

    def _subsample(self, idx, key):
        if self.max_per_class is None or len(idx) <= self.max_per_class:
            return idx
        rng = np.random.default_rng(derive_seed(self.seed, "scan-sub", key))
        return np.sort(rng.choice(idx, size=self.max_per_class, replace=False))

    def fit(self, Z, y, Z_clean, y_clean):
        Z = np.asarray(Z, dtype=np.float64)
        Z_clean = np.asarray(Z_clean, dtype=np.float64)
        y = np.asarray(y)
        y_clean = np.asarray(y_clean)
        d = min(self.n_components, Z.shape[1], max(1, len(Z_clean) - 1))
        self.pca_ = PCA(n_components=d, random_state=0).fit(Z_clean)
        P, Pc = self.pca_.transform(Z), self.pca_.transform(Z_clean)

        self.gain_, self.reference_gain_, self.skipped_ = {}, {}, []
        models = {}
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            ref = np.flatnonzero(y_clean == c)
            if len(idx) < self.min_class_size or len(ref) < self.min_class_size:
                self.skipped_.append(int(c))
                continue
            sub = self._subsample(idx, ("train", int(c)))
            seed = derive_seed(self.seed, "gmm", int(c)) % (2**31)
            self.gain_[int(c)], models[int(c)] = mixture_gain(P[sub], seed)
            self.reference_gain_[int(c)], _ = mixture_gain(Pc[self._subsample(ref, ("ref", int(c)))], seed)

        classes = sorted(self.gain_)
        score = np.array([self.gain_[c] - self.reference_gain_[c] for c in classes])
        self.score_ = dict(zip(classes, score.tolist()))
        self.anomaly_ = {}
        flagged = []
        if len(score) >= 3:
            med = np.median(score)
            mad = np.median(np.abs(score - med))
            scale = MAD_CONSISTENCY * mad if mad > 0 else np.finfo(float).eps
            for c, s in zip(classes, score):
                a = float((s - med) / scale)
                self.anomaly_[c] = a
                if a > self.threshold:
                    flagged.append(c)
        self.flagged_classes_ = flagged

        self.suspect_indices_ = {}
        for c in flagged:
            idx = np.flatnonzero(y == c)
            seed = derive_seed(self.seed, "gmm-full", c) % (2**31)
            g2 = GaussianMixture(2, covariance_type="full", reg_covar=1e-4, n_init=3, random_state=seed).fit(P[idx])
            minority = int(np.argmin(g2.weights_))
            self.suspect_indices_[c] = idx[g2.predict(P[idx]) == minority]
        return self


def scan_style_detect(embeddings, labels, clean_embeddings, clean_labels, **params):
    """Functional wrapper returning the fitted detector."""
    return ScanStyleDetector(**params).fit(embeddings, labels, clean_embeddings, clean_labels)
