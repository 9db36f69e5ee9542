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
"""Tests for the function-space objective and its gradients."""
from hypothesis import given, settings, strategies as st
import numpy as np
from numpy.testing import assert_allclose
import pytest

from conftest import central_difference
from fsvi import objective
from fsvi.context import ContextBatch
from fsvi.errors import FactorizationFailed, PolicyViolation
from fsvi.gaussian import diag_gaussian_kl
from fsvi.linearization import LinearizationConfig
from fsvi.neuralnetwork import MlpSpec, forward, vjp
from fsvi.objective import (
    GradPolicy,
    Likelihood,
    PriorSpec,
    VariationalPosterior,
    elbo,
    elbo_grad,
    expected_log_likelihood,
    function_space_kl,
    inverse_softplus,
    softplus,
    supremum_estimate,
)

EXACT = LinearizationConfig('exact')
MC = LinearizationConfig('mc_partition', num_samples=2)


def random_posterior(spec, rng, sigma=0.3):
    mu = rng.standard_normal(spec.num_params)
    rho = inverse_softplus(sigma * rng.uniform(0.5, 1.5, spec.num_params))
    return VariationalPosterior(mu, rho)


@pytest.fixture
def problem(regression_spec, rng):
    """A small regression problem with two context sets of three points."""
    X = rng.uniform(-2, 2, (8, 1))
    y = np.sin(X) + 0.1 * rng.standard_normal((8, 1))
    contexts = ContextBatch((rng.uniform(-3, 3, (3, 1)),
                             rng.uniform(-3, 3, (3, 1))))
    return (X, y), contexts


def test_softplus_inverse():
    x = np.linspace(-5, 5, 11)
    assert_allclose(inverse_softplus(softplus(x)), x, atol=1e-10)
    assert softplus(np.array([1000.0]))[0] == pytest.approx(1000.0)


def test_posterior_initialization(regression_spec, rng):
    q = VariationalPosterior.initialize(regression_spec, rng, init_sigma=1e-3)
    assert q.mu.shape == (regression_spec.num_params,)
    assert_allclose(q.sigma, 1e-3, rtol=1e-10)
    assert q.sample(rng, 4).shape == (4, regression_spec.num_params)


def test_likelihood_log_prob_values():
    regression = Likelihood('gaussian_regression', noise_variance=1.0)
    assert regression.log_prob(np.zeros((1, 1)), np.zeros((1, 1)))[0] == (
        pytest.approx(-0.9189385332, abs=1e-9)
    )
    classification = Likelihood('categorical_softmax')
    assert classification.log_prob(np.zeros((1, 2)), np.array([1]))[0] == (
        pytest.approx(-np.log(2))
    )
    with pytest.raises(ValueError):
        classification.log_prob(np.zeros((1, 2)), np.array([2]))
    with pytest.raises(ValueError):
        Likelihood('gaussian_regression', noise_variance=0.0)


@pytest.mark.parametrize('kind', ['gaussian_regression',
                                  'categorical_softmax'])
def test_likelihood_gradient(kind, rng):
    likelihood = Likelihood(kind, noise_variance=0.5)
    outputs = rng.standard_normal((4, 3))
    y = (rng.standard_normal((4, 3)) if likelihood.is_regression
         else np.array([0, 2, 1, 2]))

    def total(flat):
        return np.sum(likelihood.log_prob(flat.reshape(4, 3), y))

    assert_allclose(likelihood.grad_log_prob(outputs, y).ravel(),
                    central_difference(total, outputs.ravel()), atol=1e-6)


def test_kl_vanishes_when_posterior_equals_prior(small_spec, rng):
    prior_mean = rng.standard_normal(small_spec.num_params)
    prior = PriorSpec(variance=0.5, mean=prior_mean)
    q = VariationalPosterior(prior_mean, np.full(small_spec.num_params,
                                                 inverse_softplus(
                                                     np.sqrt(0.5))))
    X = rng.standard_normal((3, 2))
    for config in (EXACT, MC):
        assert function_space_kl(q, prior, small_spec, X, config,
                                 rng) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_function_kl_bounded_by_parameter_kl(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec.build(2, [4], 2)
    q = random_posterior(spec, rng)
    prior = PriorSpec(variance=float(rng.uniform(0.5, 2.0)),
                      mean=0.5 * rng.standard_normal(spec.num_params))
    X = rng.standard_normal((3, 2))
    function_kl = function_space_kl(q, prior, spec, X, EXACT, rng)
    parameter_kl = diag_gaussian_kl(q.as_gaussian(),
                                    prior.as_gaussian(spec.num_params))
    assert function_kl <= parameter_kl * (1 + 1e-9) + 1e-6


def test_supremum_takes_largest_set(regression_spec, problem, rng):
    _, contexts = problem
    q = random_posterior(regression_spec, rng)
    prior = PriorSpec()
    values = [function_space_kl(q, prior, regression_spec, X, EXACT, rng)
              for X in contexts.sets]
    result = supremum_estimate(q, prior, regression_spec, contexts, EXACT,
                               rng)
    assert result.value == pytest.approx(max(values), rel=1e-12)
    assert result.argmax_index == int(np.argmax(values))


def test_supremum_ties_keep_first_set(regression_spec, problem, rng):
    _, contexts = problem
    q = random_posterior(regression_spec, rng)
    twins = ContextBatch((contexts.sets[0], contexts.sets[0].copy()))
    result = supremum_estimate(q, PriorSpec(), regression_spec, twins,
                               EXACT, rng)
    assert result.argmax_index == 0


def test_elbo_composition(regression_spec, problem, rng):
    batch, contexts = problem
    q = random_posterior(regression_spec, rng)
    prior = PriorSpec()
    likelihood = Likelihood(noise_variance=0.1)
    result = elbo(q, prior, regression_spec, batch, contexts, likelihood, 3,
                  EXACT, np.random.default_rng(5), kl_scale=0.5,
                  data_scale=4.0)
    ell = expected_log_likelihood(q, regression_spec, batch, likelihood, 3,
                                  np.random.default_rng(5))
    fkl = supremum_estimate(q, prior, regression_spec, contexts, EXACT,
                            rng).value
    assert result.diagnostics.ell == pytest.approx(4.0 * ell, rel=1e-12)
    assert result.diagnostics.fkl == pytest.approx(fkl, rel=1e-12)
    assert result.value == pytest.approx(4.0 * ell - 0.5 * fkl, rel=1e-12)


def test_elbo_without_kl_is_likelihood(regression_spec, problem, rng):
    batch, contexts = problem
    q = random_posterior(regression_spec, rng)
    likelihood = Likelihood(noise_variance=0.1)
    result = elbo(q, PriorSpec(), regression_spec, batch, contexts,
                  likelihood, 2, MC, np.random.default_rng(1), kl_scale=0.0)
    assert result.value == result.diagnostics.ell


def test_gradient_value_matches_elbo(regression_spec, problem, rng):
    batch, contexts = problem
    q = random_posterior(regression_spec, rng)
    args = (q, PriorSpec(), regression_spec, batch, contexts,
            Likelihood(noise_variance=0.1), 3, MC)
    value = elbo(*args, np.random.default_rng(9)).value
    grad = elbo_grad(*args, np.random.default_rng(9))
    assert grad.value == pytest.approx(value, rel=1e-12)
    assert grad.norm > 0


def negative_elbo(spec, prior, batch, contexts, config, seed):
    likelihood = Likelihood(noise_variance=0.1)
    half = spec.num_params

    def fn(flat):
        q = VariationalPosterior(flat[:half], flat[half:])
        return -elbo(q, prior, spec, batch, contexts, likelihood, 2, config,
                     np.random.default_rng(seed), data_scale=2.0).value
    return fn


@pytest.mark.parametrize('config', [EXACT, MC], ids=['exact', 'mc'])
@pytest.mark.parametrize('policy', ['shared_variational_mean', 'prior_mean'])
def test_exact_gradient_matches_finite_differences(regression_spec, problem,
                                                   rng, config, policy):
    batch, contexts = problem
    q = random_posterior(regression_spec, rng)
    prior = PriorSpec(variance=1.0,
                      mean=rng.standard_normal(regression_spec.num_params),
                      policy=policy)
    grad = elbo_grad(q, prior, regression_spec, batch, contexts,
                     Likelihood(noise_variance=0.1), 2, config,
                     np.random.default_rng(7), data_scale=2.0,
                     grad_policy=GradPolicy.EXACT_SMALL_NET)
    fn = negative_elbo(regression_spec, prior, batch, contexts, config, 7)
    numeric = central_difference(fn, np.concatenate([q.mu, q.rho]))
    analytic = np.concatenate([grad.mu, grad.rho])
    assert (np.linalg.norm(analytic - numeric)
            <= 1e-3 * np.linalg.norm(numeric))


@pytest.mark.parametrize('config', [EXACT, MC], ids=['exact', 'mc'])
def test_stop_grad_rho_gradient_is_exact(regression_spec, problem, rng,
                                         config):
    batch, contexts = problem
    q = random_posterior(regression_spec, rng)
    prior = PriorSpec()
    grad = elbo_grad(q, prior, regression_spec, batch, contexts,
                     Likelihood(noise_variance=0.1), 2, config,
                     np.random.default_rng(3), data_scale=2.0)
    fn = negative_elbo(regression_spec, prior, batch, contexts, config, 3)
    size = regression_spec.num_params
    numeric = central_difference(fn, np.concatenate([q.mu, q.rho]))[size:]
    assert (np.linalg.norm(grad.rho - numeric)
            <= 1e-3 * np.linalg.norm(numeric))


def test_exact_gradients_refused_for_large_networks(rng):
    spec = MlpSpec.build(1, [1000], 1)
    assert spec.num_params > objective.EXACT_GRAD_MAX_PARAMS
    q = VariationalPosterior(np.zeros(spec.num_params),
                             np.zeros(spec.num_params))
    with pytest.raises(PolicyViolation):
        elbo_grad(q, PriorSpec(), spec, (np.zeros((1, 1)), np.zeros((1, 1))),
                  ContextBatch((np.zeros((2, 1)),)), Likelihood(), 1, MC,
                  rng, grad_policy='exact_small_net')


def test_degenerate_posterior_fails_factorization(regression_spec, problem,
                                                  rng):
    batch, contexts = problem
    q = VariationalPosterior(rng.standard_normal(regression_spec.num_params),
                             np.full(regression_spec.num_params, -1000.0))
    with pytest.raises(FactorizationFailed) as info:
        elbo(q, PriorSpec(), regression_spec, batch, contexts, Likelihood(),
             1, EXACT, rng, jitter_schedule=(0.0,))
    assert info.value.context_index == 0


def test_factorization_failure_names_context_set(regression_spec, problem,
                                                 rng, monkeypatch):
    batch, contexts = problem
    calls = []
    real_kl = objective.gaussian_kl

    def failing_kl(q, p, jitter_schedule):
        calls.append(q.dim)
        if len(calls) == 2:
            raise FactorizationFailed(q.dim, 1e-4)
        return real_kl(q, p, jitter_schedule)

    monkeypatch.setattr(objective, 'gaussian_kl', failing_kl)
    q = random_posterior(regression_spec, rng)
    with pytest.raises(FactorizationFailed) as info:
        supremum_estimate(q, PriorSpec(), regression_spec, contexts, EXACT,
                          rng)
    assert info.value.context_index == 1
    assert 'context set 1' in str(info.value)


@pytest.mark.parametrize('config', [EXACT, MC], ids=['exact', 'mc'])
def test_function_kl_ignores_row_order(small_spec, rng, config):
    q = random_posterior(small_spec, rng)
    prior = PriorSpec(variance=0.8)
    X = rng.standard_normal((4, 2))
    order = np.array([2, 0, 3, 1])
    value = function_space_kl(q, prior, small_spec, X, config,
                              np.random.default_rng(8))
    permuted = function_space_kl(q, prior, small_spec, X[order], config,
                                 np.random.default_rng(8))
    assert permuted == pytest.approx(value, rel=1e-9)


@pytest.mark.parametrize('config', [EXACT, MC], ids=['exact', 'mc'])
def test_supremum_never_decreases_with_more_sets(regression_spec, rng,
                                                 config):
    q = random_posterior(regression_spec, rng)
    sets = [rng.uniform(-3, 3, (3, 1)) for _ in range(5)]
    values = [supremum_estimate(q, PriorSpec(), regression_spec,
                                ContextBatch(tuple(sets[:count])), config,
                                np.random.default_rng(4)).value
              for count in range(1, len(sets) + 1)]
    assert all(later >= earlier for earlier, later in zip(values,
                                                           values[1:]))


def test_likelihood_only_gradient_is_map_gradient(regression_spec, problem,
                                                  rng):
    batch, contexts = problem
    X, y = batch
    mu = rng.standard_normal(regression_spec.num_params)
    q = VariationalPosterior(mu, np.full(regression_spec.num_params,
                                         inverse_softplus(1e-9)))
    likelihood = Likelihood(noise_variance=0.1)
    grad = elbo_grad(q, PriorSpec(), regression_spec, batch, contexts,
                     likelihood, 3, EXACT, np.random.default_rng(2),
                     kl_scale=0.0)
    outputs = forward(regression_spec, mu, X)
    backprop = vjp(regression_spec, mu, X,
                   likelihood.grad_log_prob(outputs, y))
    assert_allclose(grad.mu, -backprop, rtol=1e-6, atol=1e-8)
