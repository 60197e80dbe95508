"""Model zoo: the small MNIST CNN, the 8-conv CIFAR10 network and ResNet20.

Every network splits into ``features`` (convolutional trunk, whose last
activation drives class-activation maps) and ``head`` (dense layers). The
penultimate dense activation is exposed by :meth:`embed` for contrastive
training and representation-based defences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigurationError

ARCHITECTURES = ("mnist_cnn", "cifar_cnn", "resnet20")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple
    num_classes: int
    width: int = 16

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown model id {self.arch!r}; expected one of {ARCHITECTURES}")
        h, w, c = self.input_shape
        if self.arch == "mnist_cnn" and (h % 4 or w % 4):
            raise ConfigurationError(f"mnist_cnn needs H, W divisible by 4, got {self.input_shape}")
        if self.arch == "cifar_cnn" and (h % 8 or w % 8):
            raise ConfigurationError(f"cifar_cnn needs H, W divisible by 8, got {self.input_shape}")
        if c not in (1, 3):
            raise ConfigurationError(f"input must have 1 or 3 channels, got {c}")


class Net(nn.Module):
    def __init__(self, features, head_in, hidden, num_classes, dropout=0.0):
        super().__init__()
        self.features = features
        # hidden=None: no extra dense layer, the pooled trunk output is the embedding
        self.fc1 = nn.Linear(head_in, hidden) if hidden else nn.Identity()
        self.drop = nn.Dropout(dropout) if dropout else nn.Identity()
        self.fc2 = nn.Linear(hidden or head_in, num_classes)

    def embed(self, x):
        h = torch.flatten(self.features(x), 1)
        return F.relu(self.fc1(h))

    def forward(self, x, return_embedding=False):
        z = self.embed(x)
        logits = self.fc2(self.drop(z))
        return (logits, z) if return_embedding else logits

    def cam_layer(self):
        """Module whose output is the last convolutional activation."""
        return self.features.cam_target


class _Trunk(nn.Sequential):
    def set_cam_target(self, module):
        # plain attribute: registering it as a child would run it twice in forward
        object.__setattr__(self, "cam_target", module)
        return self


def mnist_cnn(input_shape, num_classes, width=16):
    h, w, c = input_shape
    relu2 = nn.ReLU()
    trunk = _Trunk(
        nn.Conv2d(c, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(width, 2 * width, 3, padding=1), relu2, nn.MaxPool2d(2),
    )
    trunk.set_cam_target(relu2)
    return Net(trunk, 2 * width * (h // 4) * (w // 4), 128, num_classes)


def cifar_cnn(input_shape, num_classes, width=16):
    """8 conv + 3 pool + 3 dropout + flatten + 2 dense."""
    h, w, c = input_shape
    chans = [width, width, 2 * width, 2 * width, 4 * width, 4 * width, 4 * width, 4 * width]
    layers, prev = [], c
    for i, ch in enumerate(chans):
        layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.BatchNorm2d(ch), nn.ReLU()]
        prev = ch
        if i in (1, 3, 5):
            layers += [nn.MaxPool2d(2), nn.Dropout(0.2)]
    trunk = _Trunk(*layers)
    trunk.set_cam_target(layers[-1])
    return Net(trunk, prev * (h // 8) * (w // 8), 128, num_classes)


class _Shortcut(nn.Module):
    """Parameter-free option-A shortcut: subsample and zero-pad channels."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.stride, self.pad = stride, out_ch - in_ch

    def forward(self, x):
        if self.stride > 1:
            x = x[:, :, :: self.stride, :: self.stride]
        if self.pad:
            x = F.pad(x, (0, 0, 0, 0, self.pad // 2, self.pad - self.pad // 2))
        return x


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = _Shortcut(in_ch, out_ch, stride) if (stride != 1 or in_ch != out_ch) else nn.Identity()
        self.out = nn.ReLU()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return self.out(self.bn2(self.conv2(h)) + self.shortcut(x))


def resnet20(input_shape, num_classes, width=16):
    h, w, c = input_shape
    layers = [nn.Conv2d(c, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU()]
    prev = width
    for stage, ch in enumerate([width, 2 * width, 4 * width]):
        for b in range(3):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(BasicBlock(prev, ch, stride))
            prev = ch
    layers += [nn.AdaptiveAvgPool2d(1)]
    trunk = _Trunk(*layers)
    trunk.set_cam_target(layers[-2].out)
    return Net(trunk, prev, None, num_classes)


def build_model(spec: ModelSpec):
    factory = {"mnist_cnn": mnist_cnn, "cifar_cnn": cifar_cnn, "resnet20": resnet20}[spec.arch]
    return factory(tuple(spec.input_shape), spec.num_classes, spec.width)


def trainable_layers(model):
    """Parameterised layers (conv / linear) in forward order; batch-norm rides with its conv."""
    return [m for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]


def to_tensor(X, device="cpu"):
    """(N, H, W, C) numpy batch -> (N, C, H, W) float tensor."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    return torch.from_numpy(np.array(X.transpose(0, 3, 1, 2), order="C")).to(device)


def to_numpy_images(t):
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def torch_module(handle):
    """Accept either a fitted classifier wrapper or a bare ``nn.Module``."""
    if isinstance(handle, nn.Module):
        return handle
    module = getattr(handle, "model_", None)
    if module is None:
        raise ConfigurationError("classifier handle is not fitted")
    return module
