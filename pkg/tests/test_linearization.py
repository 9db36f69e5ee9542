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
"""Tests for pushing parameter Gaussians through the linearized network."""
import numpy as np
from numpy.testing import assert_allclose
import pytest

from fsvi.errors import DimensionMismatch
from fsvi.gaussian import DiagonalGaussian
from fsvi.linearization import (
    LinearizationConfig,
    LinearizationMode,
    beta_jacobian,
    mixture_moments,
    push_forward_exact,
    push_forward_mc,
)
from fsvi.neuralnetwork import (
    MlpSpec, Partition, forward, jvp, param_jacobian
)


@pytest.fixture
def gaussian(small_spec, rng):
    return DiagonalGaussian(rng.standard_normal(small_spec.num_params),
                            rng.uniform(0.01, 0.1, small_spec.num_params))


@pytest.fixture
def inputs(rng):
    return rng.standard_normal((3, 2))


def test_exact_pushforward_moments(small_spec, gaussian, inputs):
    result = push_forward_exact(gaussian, small_spec, inputs)
    jacobian = param_jacobian(small_spec, gaussian.mean, inputs)
    assert result.dim == 6
    assert_allclose(result.mean,
                    forward(small_spec, gaussian.mean, inputs).ravel())
    assert_allclose(result.covariance,
                    jacobian @ np.diag(gaussian.variance) @ jacobian.T,
                    atol=1e-12)


def test_degenerate_parameters_give_point_mass(small_spec, inputs, rng):
    mean = rng.standard_normal(small_spec.num_params)
    g = DiagonalGaussian(mean, np.zeros(small_spec.num_params))
    result = push_forward_exact(g, small_spec, inputs)
    assert_allclose(result.mean, forward(small_spec, mean, inputs).ravel())
    assert not np.any(result.covariance)


def test_linearization_point_shifts_mean(small_spec, gaussian, inputs, rng):
    point = gaussian.mean + 0.1 * rng.standard_normal(small_spec.num_params)
    result = push_forward_exact(gaussian, small_spec, inputs, point)
    expected = (forward(small_spec, point, inputs)
                + jvp(small_spec, point, inputs, gaussian.mean - point))
    assert_allclose(result.mean, expected.ravel(), atol=1e-12)
    jacobian = param_jacobian(small_spec, point, inputs)
    assert_allclose(result.covariance,
                    (jacobian * gaussian.variance) @ jacobian.T, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        push_forward_exact(gaussian, small_spec, inputs, point[:-1])


def test_mc_without_alpha_variance_matches_exact(small_spec, inputs, rng):
    partition = Partition.default(small_spec)
    variance = np.zeros(small_spec.num_params)
    variance[partition.beta] = rng.uniform(0.01, 0.1, partition.beta.size)
    g = DiagonalGaussian(rng.standard_normal(small_spec.num_params),
                         variance)
    exact = push_forward_exact(g, small_spec, inputs)
    config = LinearizationConfig(num_samples=3)
    for component in push_forward_mc(g, small_spec, inputs, config, rng):
        assert_allclose(component.mean, exact.mean, atol=1e-10)
        assert_allclose(component.covariance, exact.covariance, atol=1e-10)


def rms_standard_errors(estimate, target, standard_error):
    """Return the root mean square of the errors in standard-error units."""
    z = (np.asarray(estimate) - target) / standard_error
    return float(np.sqrt(np.mean(z ** 2)))


def covariance_standard_error(covariance, count):
    """Standard errors of the entries of a Gaussian sample covariance."""
    variances = np.diag(covariance)
    return np.sqrt((np.outer(variances, variances) + covariance ** 2)
                   / count)


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(5))
def test_exact_pushforward_matches_linearized_samples(seed):
    rng = np.random.default_rng(2000 + seed)
    spec = MlpSpec.build(2, [int(rng.integers(2, 6))],
                         int(rng.integers(1, 3)))
    g = DiagonalGaussian(rng.standard_normal(spec.num_params),
                         rng.uniform(0.01, 0.1, spec.num_params))
    X = rng.standard_normal((3, 2))
    result = push_forward_exact(g, spec, X)
    jacobian = param_jacobian(spec, g.mean, X)
    count = 100_000
    draws = g.sample(rng, count)
    outputs = (forward(spec, g.mean, X).ravel()
               + (draws - g.mean) @ jacobian.T)
    assert rms_standard_errors(
        outputs.mean(axis=0), result.mean,
        np.sqrt(np.diag(result.covariance) / count)
    ) <= 3.0
    assert rms_standard_errors(
        np.cov(outputs.T), result.covariance,
        covariance_standard_error(result.covariance, count)
    ) <= 3.0


@pytest.mark.slow
def test_mc_mixture_moments_approach_exact(small_spec, gaussian, inputs,
                                           rng):
    exact = push_forward_exact(gaussian, small_spec, inputs)
    count = 10_000
    config = LinearizationConfig(num_samples=count)
    components = push_forward_mc(gaussian, small_spec, inputs, config, rng)
    assert len(components) == count
    moments = mixture_moments(components)
    alpha = Partition.default(small_spec).alpha
    jacobian = param_jacobian(small_spec, gaussian.mean, inputs)[:, alpha]
    alpha_covariance = (jacobian * gaussian.variance[alpha]) @ jacobian.T
    assert rms_standard_errors(
        moments.mean, exact.mean, np.sqrt(np.diag(alpha_covariance) / count)
    ) <= 3.0
    assert rms_standard_errors(
        moments.covariance, exact.covariance,
        covariance_standard_error(alpha_covariance, count)
    ) <= 3.0


def test_mc_uses_given_alpha_noise(small_spec, gaussian, inputs):
    config = LinearizationConfig(num_samples=2)
    noise = np.ones((2, 12))
    first = push_forward_mc(gaussian, small_spec, inputs, config,
                            np.random.default_rng(0), alpha_noise=noise)
    second = push_forward_mc(gaussian, small_spec, inputs, config,
                             np.random.default_rng(1), alpha_noise=noise)
    for a, b in zip(first, second):
        assert np.array_equal(a.mean, b.mean)
    with pytest.raises(DimensionMismatch):
        push_forward_mc(gaussian, small_spec, inputs, config,
                        np.random.default_rng(0), alpha_noise=noise[:1])


def test_beta_jacobian_general_partition(small_spec, gaussian, inputs):
    partition = Partition(np.arange(2, 22), np.arange(2))
    full = param_jacobian(small_spec, gaussian.mean, inputs)
    assert_allclose(beta_jacobian(small_spec, gaussian.mean, inputs,
                                  partition), full[:, :2])
    config = LinearizationConfig(num_samples=1, partition=partition)
    (component,) = push_forward_mc(gaussian, small_spec, inputs, config,
                                   np.random.default_rng(0))
    assert component.dim == 6


def test_mixture_of_one_component(small_spec, gaussian, inputs):
    exact = push_forward_exact(gaussian, small_spec, inputs)
    moments = mixture_moments([exact])
    assert_allclose(moments.mean, exact.mean)
    assert not np.any(moments.between)
    assert_allclose(moments.as_gaussian().covariance, exact.covariance)
    with pytest.raises(ValueError):
        mixture_moments([])


def test_config_validation():
    assert LinearizationConfig('exact').mode is LinearizationMode.EXACT
    with pytest.raises(ValueError):
        LinearizationConfig(num_samples=0)
    with pytest.raises(DimensionMismatch):
        LinearizationConfig(partition=Partition([0], [1])).resolve_partition(
            MlpSpec.build(1, [2], 1)
        )
