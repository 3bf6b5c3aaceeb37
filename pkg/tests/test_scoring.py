import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from dvn.datasets import Origin
from dvn.errors import NumericError
from dvn.model import LOG_2PI, VerifierArch, VerifierModel
from dvn.oracle import _diag_gauss_logpdf, exact_density_ratio
from dvn.scoring import (
    Decision,
    DecisionThreshold,
    VerifierScore,
    achieved_tpr,
    calibrate_threshold,
    corrected_prior_log_density,
    iwae_score,
    iwae_scores,
    log_mean_exp,
    read_score_dump,
    verify,
    write_score_dump,
)


class _ConstDecoder(nn.Module):
    def __init__(self, mu):
        super().__init__()
        self.mu = torch.as_tensor(mu, dtype=torch.float64)

    def forward(self, inp):
        return self.mu.expand(*inp.shape[:-1], self.mu.shape[-1])


class _NanForClassOne(nn.Module):
    def __init__(self, m, d):
        super().__init__()
        self.m, self.d = m, d

    def forward(self, inp):
        flag = inp[..., self.m + 1: self.m + 2]
        return torch.where(flag > 0, torch.full_like(flag, float("nan")), torch.zeros_like(flag)).expand(
            *inp.shape[:-1], self.d)


def model(d=3, m=2, c=2, **kw):
    return VerifierModel(VerifierArch(input_dim=d, num_classes=c, latent_dim=m, hidden=(8,), **kw), seed=1)


def test_half_discriminator_leaves_prior():
    z = torch.randn(5, 3, dtype=torch.float64)
    half = lambda v: torch.full(v.shape[:-1], 0.5, dtype=torch.float64)  # noqa: E731
    expected = -0.5 * (z ** 2).sum(-1) - 1.5 * LOG_2PI
    assert torch.allclose(corrected_prior_log_density(half, z), expected, rtol=0, atol=1e-14)


def test_two_thirds_discriminator_halves_density():
    # pick z with N(z; 0, 1) = 0.1 exactly
    z = math.sqrt(-2 * math.log(0.1 * math.sqrt(2 * math.pi)))
    d = lambda v: torch.full(v.shape[:-1], 2 / 3, dtype=torch.float64)  # noqa: E731
    q = math.exp(corrected_prior_log_density(d, torch.tensor([[z]], dtype=torch.float64)).item())
    assert q == pytest.approx(0.05, rel=1e-12)


def test_optimal_discriminator_recovers_shifted_gaussian():
    z = torch.tensor([[-1.0], [0.0], [1.0], [2.0]], dtype=torch.float64)
    d_opt = lambda v: torch.as_tensor(exact_density_ratio((0.0, 1.0), (1.0, 1.0), v.numpy())[1])  # noqa: E731
    recovered = corrected_prior_log_density(d_opt, z).exp().numpy()
    truth = np.exp(_diag_gauss_logpdf(z.numpy(), 1.0, 1.0))
    np.testing.assert_allclose(recovered, truth, rtol=1e-9)


def test_saturated_discriminator_stays_finite():
    z = torch.zeros(2, 2, dtype=torch.float64)
    for value in (0.0, 1.0):
        d = lambda v, value=value: torch.full(v.shape[:-1], value, dtype=torch.float64)  # noqa: E731
        assert torch.all(torch.isfinite(corrected_prior_log_density(d, z)))


def test_constant_weights_give_exact_score():
    mu = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    v = model(zero_init_encoder=True)
    v.decoder = _ConstDecoder(mu)
    with torch.no_grad():
        v.prior_disc[-1].weight.zero_()
        v.prior_disc[-1].bias.zero_()
    x = np.array([[1.0, 0.0, 1.5], [-2.0, 3.0, 0.0]])
    expected = -0.5 * ((x - mu.numpy()) ** 2).sum(1) - 1.5 * LOG_2PI
    for k in (1, 7, 100):
        np.testing.assert_allclose(iwae_scores(v, x, [0, 1], k=k), expected, rtol=0, atol=1e-12)


def test_scores_do_not_depend_on_chunking():
    v = model(zero_init_encoder=False)
    x = np.random.default_rng(0).standard_normal((13, 3))
    y = np.arange(13) % 2
    a = iwae_scores(v, x, y, k=9, seed=3, chunk=256)
    b = iwae_scores(v, x, y, k=9, seed=3, chunk=4)
    assert a.tobytes() == b.tobytes()
    assert iwae_score(v, x[0], int(y[0]), k=9, seed=3) == VerifierScore(float(a[0]), 9)


def test_nonfinite_decoder_names_sample():
    v = model()
    v.decoder = _NanForClassOne(2, 3)
    x = np.zeros((4, 3))
    with pytest.raises(NumericError, match="sample 2"):
        iwae_scores(v, x, [0, 0, 1, 0], k=3, chunk=2)


def test_log_mean_exp_wide_spread():
    w = torch.tensor([-1000.0, 0.0, 3.0], dtype=torch.float64)
    val = log_mean_exp(w).item()
    assert math.isfinite(val)
    assert val == pytest.approx(math.log((math.exp(-1000) + 1 + math.exp(3)) / 3), rel=1e-14)


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        iwae_scores(model(), np.zeros((1, 3)), [0], k=0)


# -- calibration and decisions --------------------------------------------------------

def test_calibration_examples():
    assert calibrate_threshold(np.arange(1, 101), 0.95).delta == 6
    t = calibrate_threshold([2.5] * 10, 0.95)
    assert t.delta == 2.5 and achieved_tpr([2.5] * 10, t) == 1.0
    assert calibrate_threshold([-4.0], 0.95).delta == -4.0
    assert calibrate_threshold(np.arange(10), 0.9).delta == 1


def test_calibration_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate_threshold([], 0.95)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0, 2.0], 0.95, origin=Origin.OOD)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0, 2.0], 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=200), st.floats(0.5, 0.99))
def test_calibrated_delta_is_largest_admissible(scores, tpr):
    t = calibrate_threshold(scores, tpr)
    arr = np.asarray(scores)
    assert np.mean(arr >= t.delta) >= tpr - 1e-9
    higher = arr[arr > t.delta]
    if higher.size:
        assert np.mean(arr >= higher.min()) < tpr + 1e-9


def test_verify_rule():
    t = DecisionThreshold(-3.0)
    assert verify(-3.0, t) == Decision.IN_DISTRIBUTION
    assert verify(VerifierScore(-3.0 + 1e-12, 100), t) == Decision.IN_DISTRIBUTION
    assert verify(float("-inf"), t) == Decision.OUT_OF_DISTRIBUTION
    assert verify(-3.0001, t) == Decision.OUT_OF_DISTRIBUTION


def test_score_dump_roundtrip(tmp_path):
    scores = np.array([-1.25, -3.0, 0.1])
    write_score_dump(tmp_path / "s.csv", scores, [0, 2, 1], DecisionThreshold(-2.0))
    ids, preds, back = read_score_dump(tmp_path / "s.csv")
    assert ids == ["0", "1", "2"] and preds.tolist() == [0, 2, 1]
    assert back.tobytes() == scores.tobytes()
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "sample_id,y_pred,l_k,decision"
    assert lines[2].endswith("out_of_distribution")
