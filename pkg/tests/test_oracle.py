import math

import numpy as np
import pytest
from scipy import integrate, stats

from dvn.oracle import (
    LinearGaussianModel,
    analytic_verifier,
    exact_conditional_logpdf,
    exact_density_ratio,
    orthogonal_linear_gaussian,
    random_linear_gaussian,
    sample_oracle,
)
from dvn.scoring import iwae_scores


def test_zero_loadings_at_mean():
    m = LinearGaussianModel(np.zeros((1, 3, 2)), np.array([[1.0, -2.0, 0.5]]), 1.0)
    assert exact_conditional_logpdf(m, [1.0, -2.0, 0.5], 0) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)


def test_variance_addition_scalar():
    m = LinearGaussianModel(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)
    assert exact_conditional_logpdf(m, [0.0], 0) == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-14)


def test_matches_quadrature():
    a, b, s, x = 1.3, 0.4, 0.7, 1.1
    m = LinearGaussianModel(np.full((1, 1, 1), a), np.full((1, 1), b), s)
    dens, _ = integrate.quad(lambda z: stats.norm.pdf(x, a * z + b, s) * stats.norm.pdf(z), -8, 8,
                             epsabs=1e-13, epsrel=1e-13)
    assert exact_conditional_logpdf(m, [x], 0) == pytest.approx(math.log(dens), abs=1e-6)


def test_matches_scipy_multivariate():
    m = random_linear_gaussian(2, 3, 2, seed=4)
    x = np.random.default_rng(0).standard_normal((5, 3))
    ref = stats.multivariate_normal(m.offsets[1], m.covariance(1)).logpdf(x)
    np.testing.assert_allclose(exact_conditional_logpdf(m, x, 1), ref, rtol=1e-12)


def test_singular_covariance_rejected():
    m = LinearGaussianModel(np.array([[[1.0], [1.0]]]), np.zeros((1, 2)), 0.0)
    with pytest.raises(ValueError):
        exact_conditional_logpdf(m, [0.0, 0.0], 0)


def test_sample_moments():
    m = random_linear_gaussian(1, 2, 2, seed=1, loading_scale=0.8)
    data = sample_oracle(m, 0, 100_000, seed=3)
    cov = np.cov(data.x.T)
    target = m.covariance(0)
    # standard error of a sample covariance entry: sqrt((S_ii S_jj + S_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target ** 2) / len(data))
    assert np.all(np.abs(cov - target) <= 3 * se)
    np.testing.assert_allclose(data.x.mean(0), m.offsets[0], atol=3 * np.sqrt(np.diag(target) / len(data)).max())


def test_tiny_noise_collapses_to_offset():
    m = LinearGaussianModel(np.zeros((1, 2, 1)), np.array([[2.0, 3.0]]), 1e-6)
    data = sample_oracle(m, 0, 50, seed=0)
    np.testing.assert_allclose(data.x, np.tile([2.0, 3.0], (50, 1)), atol=1e-5)


def test_sampling_seeds():
    m = random_linear_gaussian(2, 2, 1, seed=0)
    a, b = sample_oracle(m, None, 4000, seed=1), sample_oracle(m, None, 4000, seed=2)
    assert not np.array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.x, sample_oracle(m, None, 4000, seed=1).x)
    assert np.bincount(a.y).tolist() == [2000, 2000]


def test_density_ratio_examples():
    assert exact_density_ratio((0.0, 1.0), (0.0, 1.0), [0.3]) == (1.0, 0.5)
    ratio, d = exact_density_ratio((0.0, 1.0), (1.0, 1.0), [0.5])
    assert ratio == pytest.approx(1.0, abs=1e-15) and d == pytest.approx(0.5, abs=1e-15)
    ratio, d = exact_density_ratio((0.0, 1.0), (1.0, 1.0), [0.0])
    assert ratio == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert d == pytest.approx(0.6225, abs=5e-5)


def test_analytic_verifier_exact_for_orthogonal_loadings():
    m = orthogonal_linear_gaussian(2, 3, 2, seed=0)
    data = sample_oracle(m, None, 20, seed=1)
    scores = iwae_scores(analytic_verifier(m), data.x, data.y, k=5)
    np.testing.assert_allclose(scores, exact_conditional_logpdf(m, data.x, data.y), atol=1e-10)


def test_analytic_verifier_needs_unit_noise():
    m = random_linear_gaussian(2, 2, 1, seed=0, noise_std=0.5)
    with pytest.raises(ValueError):
        analytic_verifier(m)
