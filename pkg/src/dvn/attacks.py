"""Untargeted L-infinity sign-gradient attacks on the classifier (FGSM, BIM)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import Classifier, predict
from .datasets import Dataset, Origin
from .nets import as_tensor


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.025
    steps: int = 10
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.clip_min > self.clip_max:
            raise ValueError("clip_min exceeds clip_max")


def _loss_gradient_sign(c: Classifier, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(c.logits(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return torch.sign(grad)


def _prepare(c: Classifier, x, y_true):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xt = as_tensor(np.atleast_2d(x))
    yt = torch.as_tensor(np.atleast_1d(np.asarray(y_true, dtype=np.int64)))
    if xt.shape[1] != c.input_dim:
        raise ValueError(f"expected inputs of dimension {c.input_dim}")
    return xt, yt, single


def fgsm(c: Classifier, x, y_true, cfg: AttackConfig) -> np.ndarray:
    xt, yt, single = _prepare(c, x, y_true)
    adv = torch.clamp(xt + cfg.epsilon * _loss_gradient_sign(c, xt, yt), cfg.clip_min, cfg.clip_max)
    out = adv.detach().numpy()
    return out[0] if single else out


def bim(c: Classifier, x, y_true, cfg: AttackConfig) -> np.ndarray:
    xt, yt, single = _prepare(c, x, y_true)
    lo, hi = xt - cfg.epsilon, xt + cfg.epsilon
    adv = xt.clone()
    for _ in range(cfg.steps):
        adv = torch.clamp(adv + cfg.alpha * _loss_gradient_sign(c, adv, yt), cfg.clip_min, cfg.clip_max)
        adv = torch.minimum(torch.maximum(adv, lo), hi)
    out = adv.detach().numpy()
    return out[0] if single else out


ATTACKS = {"fgsm": fgsm, "bim": bim}


def attack_dataset(c: Classifier, data: Dataset, method: str, cfg: AttackConfig,
                   successful_only: bool = True) -> tuple[Dataset, np.ndarray]:
    """Attack every sample; returns the adversarial set (true labels kept) and the success mask.

    A sample counts as a success when the classifier's prediction on the
    perturbed input differs from its true label.
    """
    try:
        attack = ATTACKS[method]
    except KeyError:
        raise ValueError(f"unknown attack {method!r}; choose from {sorted(ATTACKS)}") from None
    x_adv = attack(c, data.x, data.y, cfg)
    y_pred, _ = predict(c, x_adv)
    success = y_pred != data.y
    keep = success if successful_only else np.ones(len(data), dtype=bool)
    if not keep.any():
        raise ValueError(f"{method} produced no successful adversarial examples")
    adv = Dataset(x_adv[keep], data.y[keep], data.num_classes, Origin.ADVERSARIAL)
    return adv, success
