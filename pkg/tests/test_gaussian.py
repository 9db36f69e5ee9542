#    Copyright 2024 Alexander Koziell-Pipe

#    Licensed under the Apache License, Version 2.0 (the "License");
#    you may not use this file except in compliance with the License.
#    You may obtain a copy of the License at

#        http://www.apache.org/licenses/LICENSE-2.0

#    Unless required by applicable law or agreed to in writing, software
#    distributed under the License is distributed on an "AS IS" BASIS,
#    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#    See the License for the specific language governing permissions and
#    limitations under the License.
"""Tests for Gaussian distributions, Cholesky and KL divergences."""
from hypothesis import given, settings, strategies as st
import numpy as np
from numpy.testing import assert_allclose
import pytest
from scipy import integrate, stats

from fsvi.errors import DimensionMismatch, FactorizationFailed
from fsvi.gaussian import (
    DiagonalGaussian,
    FunctionGaussian,
    cholesky,
    diag_gaussian_kl,
    gaussian_kl,
    gaussian_kl_grad,
    log_det_from_cholesky,
    sample,
)


def random_spd(rng, dim):
    factor = rng.standard_normal((dim, dim))
    return factor @ factor.T + 0.5 * np.eye(dim)


def random_gaussian(rng, dim):
    return FunctionGaussian(rng.standard_normal(dim), random_spd(rng, dim))


def test_cholesky_positive_definite_needs_no_jitter(rng):
    matrix = random_spd(rng, 4)
    result = cholesky(matrix)
    assert result.jitter == 0.0
    assert_allclose(result.factor @ result.factor.T, matrix, atol=1e-12)


def test_cholesky_singular_matrix_escalates_jitter():
    result = cholesky(np.ones((2, 2)))
    assert result.jitter > 0.0
    assert_allclose(result.factor @ result.factor.T,
                    np.ones((2, 2)) + result.jitter * np.eye(2), atol=1e-12)


def test_cholesky_negative_definite_fails():
    with pytest.raises(FactorizationFailed) as info:
        cholesky(-np.eye(3))
    assert info.value.dim == 3
    assert info.value.context_index is None


def test_cholesky_rejects_bad_shapes():
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))
    with pytest.raises(ValueError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_log_det_from_cholesky(rng):
    matrix = random_spd(rng, 5)
    factor = cholesky(matrix).factor
    assert log_det_from_cholesky(factor) == pytest.approx(
        np.linalg.slogdet(matrix)[1], rel=1e-10
    )


def test_kl_of_identical_gaussians_is_zero(rng):
    q = random_gaussian(rng, 4)
    assert gaussian_kl(q, q) == pytest.approx(0.0, abs=1e-10)


def test_kl_one_dimensional_matches_quadrature():
    q = FunctionGaussian(np.array([0.3]), np.array([[0.5]]))
    p = FunctionGaussian(np.array([-0.2]), np.array([[2.0]]))
    dist_q = stats.norm(0.3, np.sqrt(0.5))
    dist_p = stats.norm(-0.2, np.sqrt(2.0))
    expected, _ = integrate.quad(
        lambda x: dist_q.pdf(x) * (dist_q.logpdf(x) - dist_p.logpdf(x)),
        -20, 20
    )
    assert gaussian_kl(q, p) == pytest.approx(expected, rel=1e-6)


def test_kl_matches_closed_form(rng):
    q, p = random_gaussian(rng, 3), random_gaussian(rng, 3)
    prec_p = np.linalg.inv(p.covariance)
    diff = p.mean - q.mean
    expected = 0.5 * (np.trace(prec_p @ q.covariance) + diff @ prec_p @ diff
                      - 3 + np.log(np.linalg.det(p.covariance)
                                   / np.linalg.det(q.covariance)))
    assert gaussian_kl(q, p) == pytest.approx(expected, rel=1e-9)


def test_kl_rejects_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        gaussian_kl(random_gaussian(rng, 2), random_gaussian(rng, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1),
       st.integers(min_value=1, max_value=6))
def test_kl_is_non_negative(seed, dim):
    rng = np.random.default_rng(seed)
    assert gaussian_kl(random_gaussian(rng, dim),
                       random_gaussian(rng, dim)) >= 0.0


def test_kl_gradient_matches_finite_differences(rng):
    q, p = random_gaussian(rng, 3), random_gaussian(rng, 3)
    grad = gaussian_kl_grad(q, p)
    assert grad.value == pytest.approx(gaussian_kl(q, p), rel=1e-10)
    eps = 1e-6

    for index in range(3):
        step = np.zeros(3)
        step[index] = eps
        numeric = (gaussian_kl(FunctionGaussian(q.mean + step, q.covariance), p)
                   - gaussian_kl(FunctionGaussian(q.mean - step,
                                                  q.covariance), p)) / (2 * eps)
        assert grad.mean_q[index] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    for i, j in [(0, 0), (0, 1), (1, 2), (2, 2)]:
        step = np.zeros((3, 3))
        step[i, j] = step[j, i] = eps
        for which, analytic in (('q', grad.cov_q), ('p', grad.cov_p)):
            def kl_at(delta):
                if which == 'q':
                    return gaussian_kl(
                        FunctionGaussian(q.mean, q.covariance + delta), p)
                return gaussian_kl(
                    q, FunctionGaussian(p.mean, p.covariance + delta))
            numeric = (kl_at(step) - kl_at(-step)) / (2 * eps)
            expected = analytic[i, j] * (1 if i == j else 2)
            assert expected == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_diag_kl_matches_dense_kl(rng):
    q = DiagonalGaussian(rng.standard_normal(4), rng.uniform(0.1, 2.0, 4))
    p = DiagonalGaussian(rng.standard_normal(4), rng.uniform(0.1, 2.0, 4))
    assert diag_gaussian_kl(q, p) == pytest.approx(
        gaussian_kl(FunctionGaussian.from_diagonal(q),
                    FunctionGaussian.from_diagonal(p)), rel=1e-10
    )


def test_diag_kl_requires_positive_variances():
    q = DiagonalGaussian(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        diag_gaussian_kl(q, q)


def test_distribution_validation():
    with pytest.raises(ValueError):
        DiagonalGaussian(np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(DimensionMismatch):
        DiagonalGaussian(np.zeros(2), np.ones(3))
    with pytest.raises(ValueError):
        FunctionGaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_degenerate_covariance_samples_equal_mean():
    dist = FunctionGaussian(np.array([1.0, -2.0]), np.zeros((2, 2)))
    draws = dist.sample(np.random.default_rng(0), 5)
    assert draws.shape == (5, 2)
    assert np.all(draws == dist.mean)


def test_sample_moments(rng):
    dist = random_gaussian(rng, 2)
    draws = dist.sample(rng, 100_000)
    assert_allclose(draws.mean(axis=0), dist.mean, atol=0.05)
    assert_allclose(np.cov(draws.T), dist.covariance, rtol=0.05, atol=0.05)


def test_cholesky_hand_example():
    result = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert result.jitter == 0.0
    assert_allclose(result.factor, [[2.0, 0.0], [1.0, np.sqrt(2.0)]],
                    atol=1e-12)


def test_cholesky_of_identity():
    result = cholesky(np.eye(3), jitter_schedule=(0.0,))
    assert result.jitter == 0.0
    assert_allclose(result.factor, np.eye(3))


def test_kl_of_shifted_unit_gaussians():
    q = FunctionGaussian(np.array([1.0]), np.array([[1.0]]))
    p = FunctionGaussian(np.array([0.0]), np.array([[1.0]]))
    assert gaussian_kl(q, p) == pytest.approx(0.5, abs=1e-12)


def test_diag_kl_hand_example():
    q = DiagonalGaussian(np.zeros(1), np.array([2.0]))
    p = DiagonalGaussian(np.zeros(1), np.array([1.0]))
    assert diag_gaussian_kl(q, p) == pytest.approx(
        0.5 * (2.0 - 1.0 - np.log(2.0)), abs=1e-12
    )
    assert diag_gaussian_kl(q, p) == pytest.approx(0.15343, abs=1e-5)


def test_sample_is_reproducible_per_seed(rng):
    dense = random_gaussian(rng, 3)
    diagonal = DiagonalGaussian(np.zeros(3), np.array([0.5, 1.0, 2.0]))
    for dist in (dense, diagonal):
        first = sample(dist, np.random.default_rng(42), 7)
        second = sample(dist, np.random.default_rng(42), 7)
        assert first.shape == (7, 3)
        assert np.array_equal(first, second)
        assert not np.array_equal(
            first, sample(dist, np.random.default_rng(43), 7)
        )


def quadrature_kl_1d(q, p):
    dist_q = stats.norm(q.mean[0], np.sqrt(q.covariance[0, 0]))
    dist_p = stats.norm(p.mean[0], np.sqrt(p.covariance[0, 0]))
    lo, hi = dist_q.ppf(1e-15), dist_q.isf(1e-15)
    value, _ = integrate.quad(
        lambda x: dist_q.pdf(x) * (dist_q.logpdf(x) - dist_p.logpdf(x)),
        lo, hi, limit=200
    )
    return value


def grid_kl_2d(q, p, points=400, width=8.0):
    """Sum q (log q - log p) over a grid of +-`width` marginal deviations."""
    scale = width * np.sqrt(np.diag(q.covariance))
    axes = [np.linspace(m - s, m + s, points) for m, s in zip(q.mean, scale)]
    cell = (axes[0][1] - axes[0][0]) * (axes[1][1] - axes[1][0])
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
    dist_q = stats.multivariate_normal(q.mean, q.covariance)
    dist_p = stats.multivariate_normal(p.mean, p.covariance)
    log_q = dist_q.logpdf(grid)
    return float(np.sum(np.exp(log_q) * (log_q - dist_p.logpdf(grid)))
                 * cell)


def random_pair(rng, dim):
    if dim == 1:
        return tuple(
            FunctionGaussian(rng.standard_normal(1),
                             np.array([[rng.uniform(0.2, 3.0)]]))
            for _ in range(2)
        )
    pairs = []
    for _ in range(2):
        factor = rng.standard_normal((2, 2))
        pairs.append(FunctionGaussian(rng.standard_normal(2),
                                      factor @ factor.T + 0.2 * np.eye(2)))
    return tuple(pairs)


@pytest.mark.parametrize('seed', range(50))
def test_kl_matches_quadrature_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    dim = 1 + seed % 2
    q, p = random_pair(rng, dim)
    oracle = quadrature_kl_1d(q, p) if dim == 1 else grid_kl_2d(q, p)
    assert gaussian_kl(q, p) == pytest.approx(oracle, abs=1e-4)
