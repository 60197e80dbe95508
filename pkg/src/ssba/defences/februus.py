"""Input purification: remove the most class-activating region, fill it back in, re-predict."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from ..core import check_images
from ..models import to_tensor, torch_module


def grad_cam(module, X, class_idx=None):
    """Class-activation maps (N, H, W) in [0, 1] for ``class_idx`` (default: predicted class).

    Also returns the classes used.
    """
    layer = module.cam_layer()
    store = {}

    def hook(_, __, out):
        out.retain_grad()
        store["act"] = out

    handle = layer.register_forward_hook(hook)
    was_training = module.training
    module.eval()
    try:
        x = to_tensor(X)
        logits = module(x)
        cls = logits.argmax(1) if class_idx is None else torch.as_tensor(class_idx).expand(len(x))
        module.zero_grad(set_to_none=True)
        logits.gather(1, cls[:, None]).sum().backward()
        act, grad = store["act"], store["act"].grad
    finally:
        handle.remove()
        module.train(was_training)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
    cam = cam.detach().numpy()
    peak = cam.reshape(len(cam), -1).max(axis=1)
    cam = np.where(peak[:, None, None] > 0, cam / np.maximum(peak, 1e-12)[:, None, None], 0.0)
    return cam, cls.numpy()


def diffusion_inpaint(X, holes, tol=1e-4, max_iter=5000):
    """Fill ``holes`` (N, H, W bool) by iterating the 4-neighbour mean; other pixels are fixed."""
    X = np.array(X, dtype=np.float64)
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return X.astype(np.float32)
    for i in range(len(X)):
        if holes[i].any() and (~holes[i]).any():
            X[i][holes[i]] = X[i][~holes[i]].mean(axis=0)
    H3 = holes[..., None]
    for _ in range(max_iter):
        p = np.pad(X, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
        nb = (p[:, :-2, 1:-1] + p[:, 2:, 1:-1] + p[:, 1:-1, :-2] + p[:, 1:-1, 2:]) / 4.0
        new = np.where(H3, nb, X)
        delta = np.abs(new - X).max()
        X = new
        if delta < tol:
            break
    return np.clip(X, 0.0, 1.0).astype(np.float32)


class FebruusPurifier(BaseEstimator, TransformerMixin):
    """Saliency -> removal -> diffusion inpainting -> re-prediction.

    ``transform(X)`` returns purified images; ``purify(X)`` also returns the
    new predictions and which inputs were skipped because their saliency map
    was flat.
    """

    def __init__(self, model=None, threshold=0.8, tol=1e-4, max_iter=5000, batch_size=256):
        self.model = model
        self.threshold = threshold
        self.tol = tol
        self.max_iter = max_iter
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        return self

    def purify(self, X):
        X = check_images(X)
        module = torch_module(self.model)
        outs, preds, orig, skipped, regions = [], [], [], [], []
        for s in range(0, len(X), self.batch_size):
            xb = X[s:s + self.batch_size]
            cam, cls = grad_cam(module, xb)
            flat = cam.reshape(len(cam), -1)
            is_flat = (flat.max(axis=1) - flat.min(axis=1)) < 1e-6
            holes = cam >= self.threshold * flat.max(axis=1)[:, None, None]
            holes[is_flat] = False
            repaired = diffusion_inpaint(xb, holes, self.tol, self.max_iter)
            with torch.no_grad():
                module.eval()
                new_pred = module(to_tensor(repaired)).argmax(1).numpy()
            new_pred = np.where(is_flat, cls, new_pred)
            outs.append(repaired)
            preds.append(new_pred)
            orig.append(cls)
            skipped.append(is_flat)
            regions.append(holes)
        self.last_regions_ = np.concatenate(regions) if regions else np.zeros((0,) + X.shape[1:3], bool)
        self.last_original_predictions_ = np.concatenate(orig) if orig else np.zeros(0, int)
        return (
            np.concatenate(outs) if outs else X.copy(),
            np.concatenate(preds) if preds else np.zeros(0, int),
            np.concatenate(skipped) if skipped else np.zeros(0, bool),
        )

    def transform(self, X):
        return self.purify(X)[0]

    def predict(self, X):
        return self.purify(X)[1]


def februus_style_purify(handle, image, **params):
    """Purify one (H, W, C) image; returns (purified image, prediction, skipped flag)."""
    out, pred, skipped = FebruusPurifier(handle, **params).purify(np.asarray(image)[None])
    return out[0], int(pred[0]), bool(skipped[0])


def repair_success_rate(handle, X, true_labels, **params):
    _, pred, _ = FebruusPurifier(handle, **params).purify(X)
    return float(np.mean(pred == np.asarray(true_labels)))
