"""Importance-weighted conditional likelihood scores, threshold calibration and decisions."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .datasets import Origin
from .errors import NumericError
from .model import VerifierModel, encode_for, standard_normal_log_prob
from .nets import as_tensor, generator

D_Z_MIN, D_Z_MAX = 1e-6, 1.0 - 1e-6
DEFAULT_K = 100


class Decision(str, enum.Enum):
    IN_DISTRIBUTION = "in_distribution"
    OUT_OF_DISTRIBUTION = "out_of_distribution"


@dataclass(frozen=True)
class VerifierScore:
    l_k: float
    k: int


@dataclass(frozen=True)
class DecisionThreshold:
    delta: float
    target_tpr: float = 0.95
    calibration_size: int = 0


def corrected_prior_log_density(d_z: Callable[[torch.Tensor], torch.Tensor], z) -> torch.Tensor:
    """log q(z) = log(1 - D_z(z)) - log D_z(z) + log N(z; 0, I), with D_z clamped away from 0 and 1."""
    z = as_tensor(z)
    d = torch.clamp(d_z(z), D_Z_MIN, D_Z_MAX)
    return torch.log1p(-d) - torch.log(d) + standard_normal_log_prob(z)


def model_d_z(model: VerifierModel) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda z: torch.sigmoid(model.prior_logit(z))


def log_mean_exp(log_w: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``log(mean(exp(log_w)))`` shifted by the max; -inf rows stay -inf."""
    k = log_w.shape[dim]
    return torch.logsumexp(log_w, dim=dim) - math.log(k)


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed so a sample's score does not depend on its position in a batch."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


def _log_weights(model: VerifierModel, x: torch.Tensor, y: torch.Tensor, eps: torch.Tensor,
                 prior: str, offset: int) -> torch.Tensor:
    post = encode_for(model, x, y)
    z = post.mean[:, None, :] + post.std[:, None, :] * eps          # (n, k, m)
    log_q_zx = post.log_prob(z.transpose(0, 1)).transpose(0, 1)       # (n, k)
    if prior == "corrected":
        log_prior = corrected_prior_log_density(model_d_z(model), z)
    elif prior == "standard":
        log_prior = standard_normal_log_prob(z)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    recon = model.decode(z, y[:, None].expand(z.shape[:2]))
    bad = ~torch.isfinite(recon).all(dim=-1).all(dim=-1)
    if bad.any():
        raise NumericError(f"non-finite decoder output for sample {offset + int(bad.nonzero()[0])}")
    log_px = model.log_likelihood(x[:, None, :], recon)
    return log_prior + log_px - log_q_zx


def iwae_scores(model: VerifierModel, x, y, k: int = DEFAULT_K, seed: int = 0,
                prior: str = "corrected", chunk: int = 256) -> np.ndarray:
    """L_k(x_i | y_i) for a batch; sample ``i`` draws its k latents from ``sample_seed(seed, i)``.

    ``prior="corrected"`` uses the discriminator-estimated aggregated posterior
    as the latent prior; ``"standard"`` uses N(0, I).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = as_tensor(np.atleast_2d(x))
    y = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.int64)))
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    m = model.arch.latent_dim
    out = np.empty(len(x))
    with torch.no_grad():
        for start in range(0, len(x), chunk):
            stop = min(start + chunk, len(x))
            eps = torch.stack([
                torch.randn((k, m), generator=generator(sample_seed(seed, i)), dtype=torch.float64)
                for i in range(start, stop)
            ])
            log_w = _log_weights(model, x[start:stop], y[start:stop], eps, prior, start)
            out[start:stop] = log_mean_exp(log_w).numpy()
    return out


def iwae_score(model: VerifierModel, x, y: int, k: int = DEFAULT_K, seed: int = 0,
               prior: str = "corrected") -> VerifierScore:
    """Single-sample score; equals entry 0 of ``iwae_scores`` with the same seed."""
    value = iwae_scores(model, np.asarray(x, dtype=np.float64)[None, :], [int(y)], k, seed, prior)[0]
    return VerifierScore(float(value), k)


def calibrate_threshold(id_val_scores: Sequence[float], target_tpr: float = 0.95,
                        origin: Origin | str = Origin.IN_DISTRIBUTION) -> DecisionThreshold:
    """Largest delta admitting at least ``target_tpr`` of the validation scores.

    That is the ``floor((1 - tpr) * n)``-th smallest score (0-indexed).
    """
    if Origin(origin) != Origin.IN_DISTRIBUTION:
        raise ValueError("thresholds are calibrated on in-distribution scores only")
    scores = np.sort(np.asarray(id_val_scores, dtype=np.float64))
    if scores.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 < target_tpr < 1.0:
        raise ValueError("target_tpr must lie in (0, 1)")
    n = scores.size
    # the epsilon absorbs binary rounding in (1 - tpr) * n, e.g. (1 - 0.9) * 10
    idx = min(int(math.floor((1.0 - target_tpr) * n + 1e-9)), n - 1)
    return DecisionThreshold(float(scores[idx]), target_tpr, n)


def verify(score, threshold: DecisionThreshold) -> Decision:
    l_k = score.l_k if isinstance(score, VerifierScore) else float(score)
    return Decision.IN_DISTRIBUTION if l_k >= threshold.delta else Decision.OUT_OF_DISTRIBUTION


def achieved_tpr(scores, threshold: DecisionThreshold) -> float:
    return float(np.mean(np.asarray(scores) >= threshold.delta))


def write_score_dump(path, l_k, y_pred, threshold: DecisionThreshold | None = None, sample_ids=None) -> None:
    """CSV ``sample_id,y_pred,l_k,decision``; decision is blank without a threshold."""
    l_k = np.asarray(l_k, dtype=np.float64)
    ids = range(len(l_k)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "y_pred", "l_k", "decision"])
        for sid, yp, s in zip(ids, y_pred, l_k):
            decision = verify(s, threshold).value if threshold is not None else ""
            w.writerow([sid, int(yp), repr(float(s)), decision])


def read_score_dump(path) -> tuple[list, np.ndarray, np.ndarray]:
    ids, preds, scores = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["sample_id"])
            preds.append(int(row["y_pred"]))
            scores.append(float(row["l_k"]))
    return ids, np.array(preds, dtype=np.int64), np.array(scores)
