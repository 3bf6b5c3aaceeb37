"""The predictive model under verification, plus the max-softmax baseline score."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .datasets import Dataset, Origin
from .errors import TrainingError
from .nets import as_tensor, flat_parameters, generator, load_flat_parameters, mlp, parameter_hash, seeded

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0


def mlp_arch(input_dim: int, num_classes: int, hidden=(64, 64), activation: str = "relu") -> dict:
    return {"type": "mlp", "input_dim": input_dim, "num_classes": num_classes,
            "hidden": list(hidden), "activation": activation}


def conv_arch(side: int, num_classes: int, channels=(16, 32), hidden: int = 64) -> dict:
    """Square single-channel images of ``side x side`` pixels, flattened row-major."""
    return {"type": "conv", "input_dim": side * side, "side": side, "num_classes": num_classes,
            "channels": list(channels), "hidden": hidden}


class _ConvNet(nn.Module):
    def __init__(self, side: int, num_classes: int, channels, hidden: int):
        super().__init__()
        c1, c2 = channels
        self.side = side
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        pooled = side // 2
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c2 * pooled * pooled, hidden), nn.ReLU(),
                                  nn.Linear(hidden, num_classes))

    def forward(self, x):
        return self.head(self.features(x.reshape(-1, 1, self.side, self.side)))


def build_network(arch: dict) -> nn.Module:
    if arch["type"] == "mlp":
        sizes = [arch["input_dim"], *arch["hidden"], arch["num_classes"]]
        return mlp(sizes, arch.get("activation", "relu"))
    if arch["type"] == "conv":
        return _ConvNet(arch["side"], arch["num_classes"], arch["channels"], arch["hidden"]).double()
    raise ValueError(f"unknown architecture type {arch['type']!r}")


@dataclass
class Classifier:
    net: nn.Module
    arch: dict
    config: ClassifierConfig = field(default_factory=ClassifierConfig)
    # full-data training loss before the first epoch, then after each epoch
    loss_history: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.arch["input_dim"]

    @property
    def num_classes(self) -> int:
        return self.arch["num_classes"]

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def parameter_hash(self) -> str:
        return parameter_hash(self.net)


def _check_input(c: Classifier, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != c.input_dim:
        raise ValueError(f"expected inputs of dimension {c.input_dim}, got shape {x.shape}")
    return x2, single


def predict(c: Classifier, x):
    """Return ``(y_pred, proba)``; ties in ``proba`` resolve to the lowest class index.

    Accepts a single vector or an ``(n, d)`` batch and mirrors the input rank.
    """
    x2, single = _check_input(c, x)
    with torch.no_grad():
        proba = torch.softmax(c.logits(as_tensor(x2)), dim=1).numpy()
    y_pred = np.argmax(proba, axis=1)
    if single:
        return int(y_pred[0]), proba[0]
    return y_pred, proba


def msp_score(c: Classifier, x):
    _, proba = predict(c, x)
    return np.max(proba, axis=-1)


def accuracy(c: Classifier, data: Dataset) -> float:
    y_pred, _ = predict(c, data.x)
    return float(np.mean(y_pred == data.y))


def _mean_loss(net: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        return float(F.cross_entropy(net(x), y))


def train_classifier(train: Dataset, arch: dict, config: ClassifierConfig | None = None,
                     epochs: int | None = None, seed: int | None = None) -> Classifier:
    """Mini-batch SGD on cross-entropy. ``epochs``/``seed`` override the config."""
    config = copy.copy(config) if config is not None else ClassifierConfig()
    if epochs is not None:
        config.epochs = epochs
    if seed is not None:
        config.seed = seed
    if train.origin != Origin.IN_DISTRIBUTION:
        raise ValueError("classifier must be trained on in-distribution data")
    if arch["input_dim"] != train.dim or arch["num_classes"] != train.num_classes:
        raise ValueError("architecture does not match the training set")

    with seeded(config.seed):
        net = build_network(arch)
    x = as_tensor(train.x)
    y = torch.as_tensor(train.y)
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)
    g = generator(config.seed + 1)
    history = [_mean_loss(net, x, y)]
    for epoch in range(config.epochs):
        perm = torch.randperm(len(train), generator=g)
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError("non-finite cross-entropy", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        epoch_loss = _mean_loss(net, x, y)
        if not math.isfinite(epoch_loss):
            raise TrainingError("non-finite cross-entropy", epoch)
        history.append(epoch_loss)
        log.debug("classifier epoch %d loss %.4f", epoch, epoch_loss)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return Classifier(net, dict(arch), config, history)


def save_classifier(c: Classifier, path) -> None:
    checkpoint.write_container(path, "classifier", {"arch": c.arch, "config": asdict(c.config)},
                               flat_parameters(c.net))


def load_classifier(path) -> Classifier:
    header, flat = checkpoint.read_container(path, kind="classifier")
    net = build_network(header["arch"])
    load_flat_parameters(net, flat)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return Classifier(net, header["arch"], ClassifierConfig(**header["config"]))
