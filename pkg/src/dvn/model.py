"""The verifier: a conditional VAE with a label-disentangling MI critic and a latent prior discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError
from .nets import as_tensor, generator, mlp, seeded

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

X_ONLY = "x_only"
X_AND_Y = "x_and_y"


@dataclass
class VerifierArch:
    input_dim: int
    num_classes: int
    latent_dim: int = 16
    hidden: tuple = (64, 64)
    critic_hidden: int = 64
    disc_hidden: int = 64
    activation: str = "tanh"
    lam: float = 1.0
    encoder_conditioning: str = X_ONLY
    zero_init_encoder: bool = True
    # the verifier models s * x; scores stay in nats of x via the log-Jacobian d * log(s)
    input_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")
        if self.encoder_conditioning not in (X_ONLY, X_AND_Y):
            raise ValueError(f"unknown encoder_conditioning {self.encoder_conditioning!r}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``N(mean, exp(log_variance))``; leading dims are batch dims."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Log density summed over the last axis; ``z`` may carry extra leading sample dims."""
        var = torch.exp(self.log_variance)
        return -0.5 * torch.sum((z - self.mean) ** 2 / var + self.log_variance + LOG_2PI, dim=-1)

    def kl_to_standard_normal(self) -> torch.Tensor:
        # expm1(v) - v is the accurate form of exp(v) - 1 - v, which is >= 0
        return 0.5 * torch.sum(self.mean ** 2 + torch.expm1(self.log_variance) - self.log_variance, dim=-1)


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * torch.sum(z ** 2 + LOG_2PI, dim=-1)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl: torch.Tensor
    mi: torch.Tensor
    lam: float = 0.0
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.reconstruction + self.kl + self.lam * self.mi

    def as_floats(self) -> dict:
        return {"recon": float(self.reconstruction.detach()), "kl": float(self.kl.detach()),
                "mi": float(self.mi.detach()), "total": float(self.total.detach())}


class VerifierModel(nn.Module):
    """Encoder q(z|x), decoder p(x|z,y), MI critic T(y,z) and prior discriminator D_z(z)."""

    def __init__(self, arch: VerifierArch, seed: int = 0):
        super().__init__()
        self.arch = arch
        d, c, m = arch.input_dim, arch.num_classes, arch.latent_dim
        enc_in = d + (c if arch.encoder_conditioning == X_AND_Y else 0)
        with seeded(seed):
            self.encoder = mlp([enc_in, *arch.hidden, 2 * m], arch.activation,
                               zero_last=arch.zero_init_encoder)
            self.decoder = mlp([m + c, *reversed(arch.hidden), d], arch.activation)
            self.critic = mlp([c + m, arch.critic_hidden, 1], arch.activation)
            self.prior_disc = mlp([m, arch.disc_hidden, 1], arch.activation)

    @property
    def lam(self) -> float:
        return self.arch.lam

    def one_hot(self, y) -> torch.Tensor:
        y = torch.as_tensor(np.asarray(y, dtype=np.int64)) if not isinstance(y, torch.Tensor) else y
        return F.one_hot(y.long(), self.arch.num_classes).to(torch.float64)

    def decode(self, z: torch.Tensor, y) -> torch.Tensor:
        """Reconstruction mean; ``z`` is ``(..., n, m)`` and ``y`` broadcasts over leading dims."""
        yh = self.one_hot(y).expand(*z.shape[:-1], self.arch.num_classes)
        return self.decoder(torch.cat([z, yh], dim=-1))

    def critic_score(self, y, z: torch.Tensor) -> torch.Tensor:
        return self.critic(torch.cat([self.one_hot(y), z], dim=-1)).squeeze(-1)

    def prior_logit(self, z: torch.Tensor) -> torch.Tensor:
        """Logit of D_z(z), the probability that ``z`` came from the Gaussian prior."""
        return self.prior_disc(z).squeeze(-1)

    def log_likelihood(self, x: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
        """log p(x | z, y) for decoder output ``mean``, in nats of the unscaled input."""
        s = self.arch.input_scale
        if s == 1.0:
            return gaussian_log_likelihood(x, mean)
        return gaussian_log_likelihood(s * x, mean) + x.shape[-1] * math.log(s)

    def encoder_parameters(self):
        return [*self.encoder.parameters(), *self.decoder.parameters()]


def encode(model: VerifierModel, x, y=None) -> GaussianPosterior:
    x = as_tensor(x)
    if x.shape[-1] != model.arch.input_dim:
        raise ValueError(f"expected input dimension {model.arch.input_dim}, got {x.shape[-1]}")
    if model.arch.encoder_conditioning == X_AND_Y:
        if y is None:
            raise ValueError("this encoder is conditioned on (x, y); a label is required")
        inp = torch.cat([model.arch.input_scale * x,
                         model.one_hot(y).expand(*x.shape[:-1], model.arch.num_classes)], dim=-1)
    else:
        if y is not None:
            raise ValueError("this encoder is conditioned on x only; do not pass a label")
        inp = model.arch.input_scale * x
    out = model.encoder(inp)
    m = model.arch.latent_dim
    mean, log_var = out[..., :m], out[..., m:]
    return GaussianPosterior(mean, torch.clamp(log_var, LOGVAR_MIN, LOGVAR_MAX))


def encode_for(model: VerifierModel, x, y) -> GaussianPosterior:
    """Encode with or without the label, whichever the model's conditioning mode requires."""
    if model.arch.encoder_conditioning == X_AND_Y:
        return encode(model, x, y)
    return encode(model, x)


def _noise(shape, seed) -> torch.Tensor:
    if isinstance(seed, torch.Generator):
        return torch.randn(shape, generator=seed, dtype=torch.float64)
    return torch.randn(shape, generator=generator(seed), dtype=torch.float64)


def reparameterized_sample(post: GaussianPosterior, seed, num_samples: int | None = None) -> torch.Tensor:
    """``mean + exp(log_variance / 2) * eps``; with ``num_samples`` a leading sample axis is added."""
    shape = post.mean.shape if num_samples is None else (num_samples, *post.mean.shape)
    eps = _noise(shape, seed)
    return post.mean + post.std * eps


def gaussian_log_likelihood(x: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian log density of ``x`` around ``mean``, summed over the last axis."""
    d = x.shape[-1]
    return -0.5 * torch.sum((x - mean) ** 2, dim=-1) - 0.5 * d * LOG_2PI


def _require_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.all(torch.isfinite(value)):
        raise NumericError(f"non-finite {name}")
    return value


def elbo_terms(model: VerifierModel, x, y, num_samples: int = 1, seed=0,
               z: torch.Tensor | None = None) -> LossBreakdown:
    """Batch-mean negative ELBO split into reconstruction and KL (mi is zero).

    ``z`` may be supplied (``(num_samples, n, m)``) to share latent draws with the MI term.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    x = as_tensor(x)
    y = torch.as_tensor(np.asarray(y, dtype=np.int64)) if not isinstance(y, torch.Tensor) else y
    post = encode_for(model, x, y)
    if z is None:
        z = reparameterized_sample(post, seed, num_samples)
    recon = -model.log_likelihood(x, model.decode(z, y)).mean()
    kl = post.kl_to_standard_normal().mean()
    _require_finite("reconstruction", recon)
    _require_finite("kl", kl)
    return LossBreakdown(recon, kl, torch.zeros(()), 0.0)


def derangement(n: int, seed) -> torch.Tensor:
    """A uniformly random cyclic permutation (Sattolo), hence no fixed points."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    g = seed if isinstance(seed, torch.Generator) else generator(seed)
    perm = list(range(n))
    draws = torch.rand(n, generator=g, dtype=torch.float64).tolist()
    for i in range(n - 1, 0, -1):
        j = int(draws[i] * i)
        perm[i], perm[j] = perm[j], perm[i]
    return torch.tensor(perm)


def mi_estimate(model: VerifierModel, joint_pairs, marginal_pairs) -> torch.Tensor:
    """Jensen-Shannon MI lower bound E_joint[-softplus(-T)] - E_marginal[softplus(T)].

    Each argument is a ``(y, z)`` pair of batched tensors.
    """
    yj, zj = joint_pairs
    ym, zm = marginal_pairs
    if len(zj) == 0 or len(zm) == 0:
        raise ValueError("mi_estimate needs nonempty joint and marginal batches")
    t_joint = model.critic_score(yj, zj)
    t_marg = model.critic_score(ym, zm)
    return (-F.softplus(-t_joint)).mean() - F.softplus(t_marg).mean()


def mi_pairs(y: torch.Tensor, z: torch.Tensor, seed):
    """Joint pairs ``(y, z)`` and marginal pairs with ``z`` deranged against ``y``."""
    perm = derangement(len(y), seed)
    return (y, z), (y, z[perm])


def total_loss(model: VerifierModel, x, y, seed=0, lam: float | None = None) -> LossBreakdown:
    """reconstruction + kl + lam * MI, using one reparameterized draw shared by both parts."""
    lam = model.lam if lam is None else lam
    x = as_tensor(x)
    y = torch.as_tensor(np.asarray(y, dtype=np.int64)) if not isinstance(y, torch.Tensor) else y
    g = generator(seed)
    post = encode_for(model, x, y)
    z = reparameterized_sample(post, g)
    elbo = elbo_terms(model, x, y, z=z[None])
    joint, marginal = mi_pairs(y, z, g)
    mi = _require_finite("mutual information", mi_estimate(model, joint, marginal))
    return LossBreakdown(elbo.reconstruction, elbo.kl, mi, lam)


def critic_objective(model: VerifierModel, x, y, seed=0) -> torch.Tensor:
    """The MI estimate with the encoder detached, for critic ascent steps."""
    x = as_tensor(x)
    y = torch.as_tensor(np.asarray(y, dtype=np.int64)) if not isinstance(y, torch.Tensor) else y
    g = generator(seed)
    with torch.no_grad():
        post = encode_for(model, x, y)
        z = reparameterized_sample(post, g)
    joint, marginal = mi_pairs(y, z, g)
    return mi_estimate(model, joint, marginal)
