"""Three-player training loop and verifier checkpoints.

Per mini-batch: the MI critic ascends the MI estimate, the encoder/decoder
descend ``total_loss`` with the critic frozen, and the prior discriminator
takes one step separating Gaussian prior draws from encoder pushforward
draws. After the main loop the discriminator is fine-tuned against the final
(frozen) encoder. Training only ever sees ground-truth labels; nothing here
touches a classifier.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .datasets import Dataset, Origin
from .errors import NumericError, TrainingError
from .model import (
    VerifierArch,
    VerifierModel,
    critic_objective,
    encode_for,
    reparameterized_sample,
    total_loss,
)
from .nets import as_tensor, flat_parameters, generator, load_flat_parameters, mlp, seeded

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr_vae: float = 1e-3
    lr_critic: float = 1e-3
    lr_disc: float = 1e-3
    lam: float = 1.0
    k_critic_steps: int = 1
    seed: int = 0
    d_z_finetune_epochs: int = 50
    # every learning rate decays geometrically to this fraction of its start value
    lr_final_ratio: float = 0.1
    latent_dim: int = 16
    hidden: tuple = (64, 64)
    critic_hidden: int = 64
    disc_hidden: int = 64
    activation: str = "tanh"
    encoder_conditioning: str = "x_only"
    input_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("batch_size", "k_critic_steps", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_vae", "lr_critic", "lr_disc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.d_z_finetune_epochs < 0 or self.lam < 0:
            raise ValueError("epochs, d_z_finetune_epochs and lam must be nonnegative")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must lie in (0, 1]")

    def arch_for(self, data: Dataset) -> VerifierArch:
        return VerifierArch(
            input_dim=data.dim, num_classes=data.num_classes, latent_dim=self.latent_dim,
            hidden=self.hidden, critic_hidden=self.critic_hidden, disc_hidden=self.disc_hidden,
            activation=self.activation, lam=self.lam, encoder_conditioning=self.encoder_conditioning,
            input_scale=self.input_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "recon", "kl", "mi", "total", "dz_acc", "seconds")

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def _optimizer(params, lr):
    # RMSprop without momentum: adaptive per-parameter steps, no velocity state
    return torch.optim.RMSprop(params, lr=lr, alpha=0.99, momentum=0.0)


def _decay(opt, periods: int, final_ratio: float):
    gamma = final_ratio ** (1.0 / max(periods, 1))
    return torch.optim.lr_scheduler.ExponentialLR(opt, gamma=gamma)


def _disc_step(disc: nn.Module, opt, z_prior: torch.Tensor, z_post: torch.Tensor,
               prior_label: float = 1.0) -> tuple[float, float]:
    """One balanced BCE step; returns (loss, accuracy) measured before the update."""
    logits = disc(torch.cat([z_prior, z_post])).squeeze(-1)
    target = torch.cat([torch.full((len(z_prior),), prior_label),
                        torch.full((len(z_post),), 1.0 - prior_label)])
    loss = F.binary_cross_entropy_with_logits(logits, target)
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        acc = float(((logits > 0).double() == target).double().mean())
    return float(loss.detach()), acc


def fit_prior_discriminator(
    sample_posterior: Callable[[int, torch.Generator], torch.Tensor],
    latent_dim: int,
    steps: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    disc: nn.Module | None = None,
    hidden: int = 64,
    activation: str = "tanh",
    prior_label: float = 1.0,
    lr_final_ratio: float = 0.1,
) -> nn.Module:
    """Train D_z to tell N(0, I) draws (label ``prior_label``) from pushforward draws.

    ``sample_posterior(n, g)`` must return ``n`` latent codes drawn from the
    aggregated posterior, reparameterization noise included. At the optimum
    ``sigmoid(disc(z)) = p(z) / (p(z) + q(z))`` for the default labelling.
    """
    if disc is None:
        with seeded(seed):
            disc = mlp([latent_dim, hidden, 1], activation)
    opt = _optimizer(disc.parameters(), lr)
    sched = _decay(opt, steps, lr_final_ratio)
    g = generator(seed + 7919)
    for step in range(steps):
        z_prior = torch.randn((batch_size, latent_dim), generator=g, dtype=torch.float64)
        z_post = sample_posterior(batch_size, g).detach()
        loss, _ = _disc_step(disc, opt, z_prior, z_post, prior_label)
        sched.step()
        if not math.isfinite(loss):
            raise TrainingError("non-finite discriminator loss", step)
    return disc


def pushforward_sampler(model: VerifierModel, data: Dataset) -> Callable[[int, torch.Generator], torch.Tensor]:
    """Sampler of q(z) = E_x q(z|x) over ``data`` using the model's (frozen) encoder."""
    x = as_tensor(data.x)
    y = torch.as_tensor(data.y)

    def sample(n: int, g: torch.Generator) -> torch.Tensor:
        idx = torch.randint(len(x), (n,), generator=g)
        with torch.no_grad():
            post = encode_for(model, x[idx], y[idx])
            return reparameterized_sample(post, g)

    return sample


def train_dvn(train: Dataset, config: TrainConfig) -> tuple[VerifierModel, TrainLog]:
    if train.origin != Origin.IN_DISTRIBUTION:
        raise ValueError("the verifier trains on in-distribution data with ground-truth labels only")
    if len(train) < 2:
        raise ValueError("need at least two training samples")
    model = VerifierModel(config.arch_for(train), seed=config.seed)
    log_ = TrainLog()
    if config.epochs == 0:
        return model, log_

    x = as_tensor(train.x)
    y = torch.as_tensor(train.y)
    m = config.latent_dim
    vae_opt = _optimizer(model.encoder_parameters(), config.lr_vae)
    critic_opt = _optimizer(model.critic.parameters(), config.lr_critic)
    disc_opt = _optimizer(model.prior_disc.parameters(), config.lr_disc)
    schedules = [_decay(o, config.epochs, config.lr_final_ratio) for o in (vae_opt, critic_opt, disc_opt)]
    g = generator(config.seed + 1)
    last_good = copy.deepcopy(model.state_dict())

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = {"recon": 0.0, "kl": 0.0, "mi": 0.0, "total": 0.0}
        dz_hits, batches = 0.0, 0
        perm = torch.randperm(len(train), generator=g)
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x[idx], y[idx]
            step_seed = int(torch.randint(2**62, (1,), generator=g))
            try:
                for k in range(config.k_critic_steps):
                    mi = critic_objective(model, xb, yb, seed=step_seed + 1 + k)
                    critic_opt.zero_grad()
                    (-mi).backward()
                    critic_opt.step()

                loss = total_loss(model, xb, yb, seed=step_seed)
                vae_opt.zero_grad()
                loss.total.backward()
                vae_opt.step()
            except NumericError as exc:
                model.load_state_dict(last_good)
                raise TrainingError(str(exc), epoch, last_good=model) from exc
            if not torch.isfinite(loss.total):
                model.load_state_dict(last_good)
                raise TrainingError("non-finite total loss", epoch, last_good=model)

            with torch.no_grad():
                z_post = reparameterized_sample(encode_for(model, xb, yb), g)
            z_prior = torch.randn((len(idx), m), generator=g, dtype=torch.float64)
            _, acc = _disc_step(model.prior_disc, disc_opt, z_prior, z_post)

            for key, val in loss.as_floats().items():
                sums[key] += val
            dz_hits += acc
            batches += 1

        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()},
               "dz_acc": dz_hits / batches, "seconds": time.perf_counter() - t0}
        log_.rows.append(row)
        for sch in schedules:
            sch.step()
        last_good = copy.deepcopy(model.state_dict())
        log.debug("epoch %d total %.4f mi %.4f dz_acc %.3f", epoch, row["total"], row["mi"], row["dz_acc"])

    if config.d_z_finetune_epochs:
        steps = config.d_z_finetune_epochs * max(1, math.ceil(len(train) / config.batch_size))
        fit_prior_discriminator(
            pushforward_sampler(model, train), m, steps, batch_size=config.batch_size,
            lr=config.lr_disc, seed=config.seed + 2, disc=model.prior_disc,
            lr_final_ratio=config.lr_final_ratio,
        )
    model.eval()
    return model, log_


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: VerifierModel, path, train_config: TrainConfig | None = None) -> None:
    arch = model.arch.to_dict()
    header = {
        "arch": arch,
        "lam": arch["lam"],
        "latent_dim": arch["latent_dim"],
        "encoder_conditioning": arch["encoder_conditioning"],
        "blocks": [[name, int(t.numel())] for name, t in model.state_dict().items()],
        "train_config": train_config.to_dict() if train_config is not None else None,
    }
    checkpoint.write_container(path, "verifier", header, flat_parameters(model))


def load_checkpoint(path) -> VerifierModel:
    header, flat = checkpoint.read_container(path, kind="verifier")
    model = VerifierModel(VerifierArch(**header["arch"]))
    try:
        load_flat_parameters(model, flat)
    except ValueError as exc:
        raise checkpoint.CheckpointFormatError(str(exc), 16) from exc
    model.eval()
    return model
