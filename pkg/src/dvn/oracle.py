"""Linear-Gaussian reference models with exact likelihoods and density ratios.

Generative process per class ``y``::

    z ~ N(0, I_m),   x = A_y z + b_y + sigma * eps,   eps ~ N(0, I_d)

so ``p(x | y) = N(b_y, A_y A_y^T + sigma^2 I)`` in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .datasets import Dataset, Origin
from .model import X_AND_Y, VerifierArch, VerifierModel


@dataclass(frozen=True)
class LinearGaussianModel:
    loadings: np.ndarray  # (C, d, m)
    offsets: np.ndarray   # (C, d)
    noise_std: float

    def __post_init__(self):
        a = np.asarray(self.loadings, dtype=np.float64)
        b = np.asarray(self.offsets, dtype=np.float64)
        if a.ndim != 3 or b.shape != a.shape[:2]:
            raise ValueError("loadings must be (C, d, m) and offsets (C, d)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        object.__setattr__(self, "loadings", a)
        object.__setattr__(self, "offsets", b)

    @property
    def num_classes(self) -> int:
        return self.loadings.shape[0]

    @property
    def dim(self) -> int:
        return self.loadings.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.loadings.shape[2]

    def covariance(self, y: int) -> np.ndarray:
        a = self.loadings[y]
        return a @ a.T + self.noise_std ** 2 * np.eye(self.dim)


def random_linear_gaussian(num_classes: int, dim: int, latent_dim: int, seed: int,
                           loading_scale: float = 1.0, offset_scale: float = 4.0,
                           noise_std: float = 1.0) -> LinearGaussianModel:
    rng = np.random.default_rng(seed)
    a = loading_scale * rng.standard_normal((num_classes, dim, latent_dim))
    b = offset_scale * rng.standard_normal((num_classes, dim))
    return LinearGaussianModel(a, b, noise_std)


def exact_conditional_logpdf(model: LinearGaussianModel, x, y) -> np.ndarray | float:
    """log N(x; b_y, A_y A_y^T + sigma^2 I); vectorised over rows of ``x`` when ``y`` is an array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    ys = np.broadcast_to(np.asarray(y, dtype=np.int64), (x2.shape[0],))
    out = np.empty(x2.shape[0])
    d = model.dim
    for c in np.unique(ys):
        cov = model.covariance(int(c))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"class {c} covariance is singular") from exc
        if np.min(np.diag(chol)) <= 0:
            raise ValueError(f"class {c} covariance is singular")
        rows = ys == c
        diff = (x2[rows] - model.offsets[c]).T
        sol = np.linalg.solve(chol, diff)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[rows] = -0.5 * (np.sum(sol ** 2, axis=0) + logdet + d * math.log(2 * math.pi))
    return float(out[0]) if single else out


def sample_oracle(model: LinearGaussianModel, y, n: int, seed: int) -> Dataset:
    """``n`` draws from class ``y``; pass ``y=None`` for a balanced draw over all classes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if y is None:
        ys = (np.arange(n) % model.num_classes)[rng.permutation(n)]
    else:
        ys = np.full(n, int(y))
    z = rng.standard_normal((n, model.latent_dim))
    eps = rng.standard_normal((n, model.dim))
    x = np.einsum("ndm,nm->nd", model.loadings[ys], z) + model.offsets[ys] + model.noise_std * eps
    return Dataset(x, ys, model.num_classes, Origin.IN_DISTRIBUTION)


def _diag_gauss_logpdf(z, mean, std) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), z.shape[-1:])
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), z.shape[-1:])
    return np.sum(-0.5 * ((z - mean) / std) ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi), axis=-1)


def exact_density_ratio(p_spec, q_spec, z):
    """Return ``(q(z) / p(z), p / (p + q))`` for diagonal Gaussians given as ``(mean, std)``."""
    log_p = _diag_gauss_logpdf(z, *p_spec)
    log_q = _diag_gauss_logpdf(z, *q_spec)
    ratio = np.exp(log_q - log_p)
    d_opt = 1.0 / (1.0 + ratio)
    if np.ndim(ratio) == 0:
        return float(ratio), float(d_opt)
    return ratio, d_opt


# -- an exactly specified verifier for the linear-Gaussian case ---------------------

class _PosteriorEncoder(nn.Module):
    """Maps ``[x, onehot(y)]`` to the exact posterior p(z | x, y) (mean, log-variance)."""

    def __init__(self, model: LinearGaussianModel):
        super().__init__()
        c, d, m = model.loadings.shape
        s2 = model.noise_std ** 2
        gains, logvars = [], []
        for a in model.loadings:
            prec = np.eye(m) + a.T @ a / s2
            cov = np.linalg.inv(prec)
            gains.append(cov @ a.T / s2)
            # diagonal family: exact only when the posterior covariance is diagonal
            logvars.append(np.log(np.diag(cov)))
        self.d = d
        self.register_buffer("gain", torch.tensor(np.array(gains)))          # (C, m, d)
        self.register_buffer("offset", torch.tensor(model.offsets))           # (C, d)
        self.register_buffer("logvar", torch.tensor(np.array(logvars)))       # (C, m)

    def forward(self, inp):
        x, onehot = inp[..., : self.d], inp[..., self.d:]
        offset = onehot @ self.offset
        gain = torch.einsum("...c,cmd->...md", onehot, self.gain)
        mean = torch.einsum("...md,...d->...m", gain, x - offset)
        return torch.cat([mean, onehot @ self.logvar], dim=-1)


class _LinearDecoder(nn.Module):
    def __init__(self, model: LinearGaussianModel):
        super().__init__()
        self.m = model.latent_dim
        self.register_buffer("loadings", torch.tensor(model.loadings))
        self.register_buffer("offset", torch.tensor(model.offsets))

    def forward(self, inp):
        z, onehot = inp[..., : self.m], inp[..., self.m:]
        a = torch.einsum("...c,cdm->...dm", onehot, self.loadings)
        return torch.einsum("...dm,...m->...d", a, z) + onehot @ self.offset


class _ConstantLogit(nn.Module):
    def forward(self, z):
        return torch.zeros((*z.shape[:-1], 1), dtype=torch.float64)


def analytic_verifier(model: LinearGaussianModel) -> VerifierModel:
    """A verifier whose encoder is the true posterior and decoder the true conditional.

    Requires ``noise_std == 1`` (the verifier's likelihood is unit Gaussian).
    The encoder is exact when the loadings have orthogonal columns; otherwise it
    keeps the posterior's marginal variances, a proposal that is still valid for
    importance sampling but only converges as k grows. The prior discriminator
    outputs 1/2 everywhere, i.e. q(z) = p(z), which holds because the
    generative latent prior is N(0, I).
    """
    if not math.isclose(model.noise_std, 1.0):
        raise ValueError("analytic verifier needs noise_std == 1 to match the unit-Gaussian decoder")
    c, d, m = model.loadings.shape
    arch = VerifierArch(input_dim=d, num_classes=c, latent_dim=m, lam=0.0, encoder_conditioning=X_AND_Y)
    v = VerifierModel(arch)
    v.encoder = _PosteriorEncoder(model)
    v.decoder = _LinearDecoder(model)
    v.prior_disc = _ConstantLogit()
    v.eval()
    return v


def orthogonal_linear_gaussian(num_classes: int, dim: int, latent_dim: int, seed: int,
                               loading_scale: float = 1.5, offset_scale: float = 4.0) -> LinearGaussianModel:
    """Unit-noise model whose per-class loadings have orthogonal columns (scaled Q factors)."""
    if latent_dim > dim:
        raise ValueError("latent_dim must not exceed dim")
    rng = np.random.default_rng(seed)
    loads = []
    for _ in range(num_classes):
        q, _ = np.linalg.qr(rng.standard_normal((dim, latent_dim)))
        scales = loading_scale * (0.5 + rng.uniform(size=latent_dim))
        loads.append(q * scales)
    b = offset_scale * rng.standard_normal((num_classes, dim))
    return LinearGaussianModel(np.array(loads), b, 1.0)
