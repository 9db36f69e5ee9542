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
"""The function-space variational objective and its gradient.

The objective is the reparameterized expected log-likelihood of a
mini-batch minus the largest function-space KL divergence over a batch of
context sets. Each KL compares the variational and prior parameter
Gaussians after pushing both through the linearized network.

Random numbers are drawn from the supplied generator in a fixed order:
first the M x P likelihood noise, then, for every context set in turn, the
R x |alpha| noise of the Monte Carlo pushforward (none in exact mode).
:py:func:`elbo` and :py:func:`elbo_grad` therefore see identical draws for
identically seeded generators.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from enum import StrEnum
import logging
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, log_softmax

from fsvi.context import ContextBatch
from fsvi.errors import (
    DimensionMismatch, EmptyData, FactorizationFailed, PolicyViolation
)
from fsvi.gaussian import (
    DEFAULT_JITTER, DiagonalGaussian, gaussian_kl, gaussian_kl_grad
)
from fsvi.linearization import (
    LinearizationConfig, LinearizationMode, beta_jacobian,
    push_forward_exact, push_forward_mc
)
from fsvi.neuralnetwork import (
    MlpSpec, forward, init_params, jacobian_contraction_grad,
    param_jacobian, vjp
)

logger = logging.getLogger(__name__)

EXACT_GRAD_MAX_PARAMS = 2000
"""Largest network for which exact (second-order) gradients are allowed."""


def softplus(x: np.ndarray) -> np.ndarray:
    """Return log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


def inverse_softplus(y: np.ndarray | float) -> np.ndarray:
    """Return x with softplus(x) = y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    """A mean-field Gaussian posterior ``N(mu, softplus(rho)^2)``."""

    mu: np.ndarray
    rho: np.ndarray
    """Unconstrained parameters of the standard deviations."""

    def __post_init__(self) -> None:
        """Check shapes and freeze the arrays."""
        mu = np.array(self.mu, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        if mu.ndim != 1 or rho.shape != mu.shape:
            raise DimensionMismatch(
                f'mu of shape {mu.shape} and rho of shape {rho.shape} '
                + 'do not match.'
            )
        mu.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, 'mu', mu)
        object.__setattr__(self, 'rho', rho)

    @classmethod
    def initialize(cls, spec: MlpSpec, rng: np.random.Generator,
                   init_sigma: float = 1e-3,
                   scheme: str = 'uniform_fan_in') -> VariationalPosterior:
        """Initialize means with `scheme` and all deviations at `init_sigma`."""
        mu = init_params(spec, rng, scheme).values
        rho = np.full(spec.num_params, inverse_softplus(init_sigma))
        return cls(mu, rho)

    @property
    def sigma(self) -> np.ndarray:
        """Return the standard deviations softplus(rho)."""
        return softplus(self.rho)

    def as_gaussian(self) -> DiagonalGaussian:
        """Return the induced diagonal Gaussian over parameters."""
        return DiagonalGaussian(self.mu, self.sigma ** 2)

    def reparameterize(self, noise: np.ndarray) -> np.ndarray:
        """Return ``mu + sigma * noise`` (row-wise for a batch of noise)."""
        return self.mu + self.sigma * noise

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw `count` parameter vectors as rows."""
        return self.reparameterize(
            rng.standard_normal((count, self.mu.shape[0]))
        )


class LinearizationPolicy(StrEnum):
    """Where the prior is linearized."""

    PRIOR_MEAN = 'prior_mean'
    SHARED_VARIATIONAL_MEAN = 'shared_variational_mean'


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """An isotropic Gaussian prior ``N(mean, variance * I)``."""

    variance: float = 1.0
    mean: np.ndarray | None = None
    """Prior mean, or ``None`` for the zero vector."""
    policy: LinearizationPolicy = (
        LinearizationPolicy.SHARED_VARIATIONAL_MEAN
    )

    def __post_init__(self) -> None:
        """Validate the prior."""
        if not float(self.variance) > 0:
            raise ValueError('Prior variance must be positive.')
        object.__setattr__(self, 'variance', float(self.variance))
        object.__setattr__(self, 'policy', LinearizationPolicy(self.policy))
        if self.mean is not None:
            mean = np.array(self.mean, dtype=np.float64)
            mean.setflags(write=False)
            object.__setattr__(self, 'mean', mean)

    def mean_vector(self, num_params: int) -> np.ndarray:
        """Return the prior mean as a dense vector."""
        if self.mean is None:
            return np.zeros(num_params)
        if self.mean.shape != (num_params,):
            raise DimensionMismatch(
                f'Prior mean of shape {self.mean.shape} does not match '
                + f'{num_params} parameters.'
            )
        return self.mean

    def as_gaussian(self, num_params: int) -> DiagonalGaussian:
        """Return the prior as a diagonal Gaussian."""
        return DiagonalGaussian(self.mean_vector(num_params),
                                np.full(num_params, self.variance))

    def linearization_point(self, q: VariationalPosterior) -> np.ndarray:
        """Return the point the prior is linearized about."""
        if self.policy is LinearizationPolicy.SHARED_VARIATIONAL_MEAN:
            return q.mu
        return self.mean_vector(q.mu.shape[0])


class LikelihoodKind(StrEnum):
    """Observation models."""

    GAUSSIAN_REGRESSION = 'gaussian_regression'
    CATEGORICAL_SOFTMAX = 'categorical_softmax'


@dataclass(frozen=True)
class Likelihood:
    """The observation model p(y | f(x; theta))."""

    kind: LikelihoodKind = LikelihoodKind.GAUSSIAN_REGRESSION
    noise_variance: float = 1.0
    """Observation noise variance (regression only)."""

    def __post_init__(self) -> None:
        """Validate the likelihood."""
        object.__setattr__(self, 'kind', LikelihoodKind(self.kind))
        if self.is_regression and not float(self.noise_variance) > 0:
            raise ValueError('Noise variance must be positive.')
        object.__setattr__(self, 'noise_variance',
                           float(self.noise_variance))

    @property
    def is_regression(self) -> bool:
        """Return whether this is the Gaussian regression likelihood."""
        return self.kind is LikelihoodKind.GAUSSIAN_REGRESSION

    def _targets(self, outputs: np.ndarray, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if self.is_regression:
            y = y.astype(np.float64).reshape(outputs.shape[0], -1)
            if y.shape != outputs.shape:
                raise DimensionMismatch(
                    f'Targets of shape {y.shape} do not match outputs of '
                    + f'shape {outputs.shape}.'
                )
            return y
        labels = y.reshape(-1).astype(np.intp)
        if labels.shape[0] != outputs.shape[0]:
            raise DimensionMismatch(
                f'{labels.shape[0]} labels for {outputs.shape[0]} outputs.'
            )
        if np.any(labels < 0) or np.any(labels >= outputs.shape[1]):
            raise ValueError('Class labels out of range.')
        return labels

    def log_prob(self, outputs: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Return per-point log-likelihoods of targets `y`."""
        targets = self._targets(outputs, y)
        if self.is_regression:
            residual = targets - outputs
            return -0.5 * np.sum(
                np.log(2 * np.pi * self.noise_variance)
                + residual ** 2 / self.noise_variance, axis=1
            )
        log_probs = log_softmax(outputs, axis=1)
        return log_probs[np.arange(outputs.shape[0]), targets]

    def grad_log_prob(self, outputs: np.ndarray,
                      y: np.ndarray) -> np.ndarray:
        """Return the derivative of the summed log-likelihood w.r.t. outputs."""
        targets = self._targets(outputs, y)
        if self.is_regression:
            return (targets - outputs) / self.noise_variance
        grad = -np.exp(log_softmax(outputs, axis=1))
        grad[np.arange(outputs.shape[0]), targets] += 1.0
        return grad

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-serializable description."""
        return {'kind': str(self.kind),
                'noise_variance': self.noise_variance}


class GradPolicy(StrEnum):
    """How gradients treat the Jacobians of the linearization."""

    STOP_GRAD_JACOBIAN = 'stop_grad_jacobian'
    EXACT_SMALL_NET = 'exact_small_net'


@dataclass(frozen=True)
class SupremumEstimate:
    """The largest function-space KL over a batch of context sets."""

    value: float
    argmax_index: int


@dataclass(frozen=True)
class ElboDiagnostics:
    """The two terms of the objective.

    Attributes:
        ell: The (data-scaled) expected log-likelihood.
        fkl: The supremum estimate of the function-space KL.
        argmax_index: The context set attaining the supremum.
    """

    ell: float
    fkl: float
    argmax_index: int


@dataclass(frozen=True)
class ElboResult:
    """Value of the objective with its diagnostics."""

    value: float
    diagnostics: ElboDiagnostics


@dataclass(frozen=True, eq=False)
class ElboGradient:
    """Gradient of the negative objective w.r.t. the variational parameters.

    The value and diagnostics are those of the matching :py:func:`elbo`
    call.
    """

    mu: np.ndarray
    rho: np.ndarray
    value: float
    diagnostics: ElboDiagnostics

    @property
    def norm(self) -> float:
        """Return the Euclidean norm of the full gradient."""
        return float(np.sqrt(np.sum(self.mu ** 2) + np.sum(self.rho ** 2)))


@dataclass(frozen=True, eq=False)
class _Noise:
    """Standard-normal draws used by one objective evaluation."""

    likelihood: np.ndarray
    alpha: list[np.ndarray | None] = field(default_factory=list)


def _alpha_noise(rng: np.random.Generator, spec: MlpSpec,
                 config: LinearizationConfig) -> np.ndarray | None:
    if config.mode is LinearizationMode.EXACT:
        return None
    partition = config.resolve_partition(spec)
    return rng.standard_normal((config.num_samples, partition.alpha.size))


def _draw_noise(rng: np.random.Generator, spec: MlpSpec, num_samples: int,
                num_sets: int, config: LinearizationConfig) -> _Noise:
    likelihood = rng.standard_normal((num_samples, spec.num_params))
    return _Noise(likelihood,
                  [_alpha_noise(rng, spec, config) for _ in range(num_sets)])


def _check_contexts(contexts: ContextBatch) -> None:
    if not contexts.sets:
        raise EmptyData('At least one context set is required.')


def _check_batch(spec: MlpSpec, batch: tuple[np.ndarray, np.ndarray]
                 ) -> tuple[np.ndarray, np.ndarray]:
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyData('The mini-batch must contain at least one point.')
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f'Inputs of shape {X.shape} do not match input dimension '
            + f'{spec.input_dim}.'
        )
    return X, np.asarray(y)


def _pushforward_pairs(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
                       X: np.ndarray, config: LinearizationConfig,
                       rng: np.random.Generator | None,
                       alpha_noise: np.ndarray | None) -> list[tuple]:
    """Return matched (variational, prior) pushforwards at `X`."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyData('Evaluation set must contain at least one point.')
    q_gaussian = q.as_gaussian()
    p_gaussian = p.as_gaussian(spec.num_params)
    p_point = p.linearization_point(q)
    if config.mode is LinearizationMode.EXACT:
        return [(push_forward_exact(q_gaussian, spec, X),
                 push_forward_exact(p_gaussian, spec, X, p_point))]
    q_components = push_forward_mc(q_gaussian, spec, X, config, rng,
                                   alpha_noise=alpha_noise)
    p_components = push_forward_mc(p_gaussian, spec, X, config, rng,
                                   linearization_point=p_point,
                                   alpha_noise=alpha_noise)
    return list(zip(q_components, p_components))


def _function_space_kl(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
                       X: np.ndarray, config: LinearizationConfig,
                       alpha_noise: np.ndarray | None,
                       jitter_schedule: Sequence[float]) -> float:
    pairs = _pushforward_pairs(q, p, spec, X, config, None, alpha_noise)
    return float(np.mean([gaussian_kl(qc, pc, jitter_schedule)
                          for qc, pc in pairs]))


def function_space_kl(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
                      X: np.ndarray, lin_config: LinearizationConfig,
                      rng: np.random.Generator,
                      jitter_schedule: Sequence[float] = DEFAULT_JITTER
                      ) -> float:
    """Return the KL between the linearized variational and prior functions.

    `q` is linearized about its mean and `p` about the point chosen by its
    :py:class:`LinearizationPolicy`. In Monte Carlo mode both pushforwards
    share the same alpha-block noise; with R > 1 the component-wise KLs are
    averaged.

    Raises:
        EmptyData: If `X` has no rows.
        FactorizationFailed: If a pushforward covariance is degenerate
                             beyond the jitter schedule.
    """
    alpha_noise = _alpha_noise(rng, spec, lin_config)
    return _function_space_kl(q, p, spec, X, lin_config, alpha_noise,
                              jitter_schedule)


def _supremum(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
              contexts: ContextBatch, config: LinearizationConfig,
              alpha_noise: list[np.ndarray | None],
              jitter_schedule: Sequence[float]) -> SupremumEstimate:
    best_value, best_index = -np.inf, 0
    for index, X in enumerate(contexts.sets):
        try:
            value = _function_space_kl(q, p, spec, X, config,
                                       alpha_noise[index], jitter_schedule)
        except FactorizationFailed as error:
            raise error.at_context(index) from error
        # Strict comparison keeps the lowest index on ties.
        if value > best_value:
            best_value, best_index = value, index
    return SupremumEstimate(float(best_value), best_index)


def supremum_estimate(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
                      contexts: ContextBatch,
                      lin_config: LinearizationConfig,
                      rng: np.random.Generator,
                      jitter_schedule: Sequence[float] = DEFAULT_JITTER
                      ) -> SupremumEstimate:
    """Estimate the supremum of the function-space KL by a max over sets.

    Ties are broken by the lowest context-set index.
    """
    _check_contexts(contexts)
    alpha_noise = [_alpha_noise(rng, spec, lin_config)
                   for _ in contexts.sets]
    return _supremum(q, p, spec, contexts, lin_config, alpha_noise,
                     jitter_schedule)


def _expected_log_likelihood(q: VariationalPosterior, spec: MlpSpec,
                             X: np.ndarray, y: np.ndarray,
                             likelihood: Likelihood, noise: np.ndarray,
                             with_grad: bool = False
                             ) -> tuple[float, np.ndarray, np.ndarray]:
    """Return the MC log-likelihood and, optionally, its mu/sigma gradients."""
    total = 0.0
    grad_mu = np.zeros_like(q.mu)
    grad_sigma = np.zeros_like(q.mu)
    for eps in noise:
        theta = q.reparameterize(eps)
        outputs = forward(spec, theta, X)
        total += float(np.sum(likelihood.log_prob(outputs, y)))
        if with_grad:
            pulled = vjp(spec, theta, X,
                         likelihood.grad_log_prob(outputs, y))
            grad_mu += pulled
            grad_sigma += pulled * eps
    count = noise.shape[0]
    return total / count, grad_mu / count, grad_sigma / count


def expected_log_likelihood(q: VariationalPosterior, spec: MlpSpec,
                            batch: tuple[np.ndarray, np.ndarray],
                            likelihood: Likelihood, num_samples: int,
                            rng: np.random.Generator) -> float:
    """Return the reparameterized Monte Carlo expected log-likelihood.

    Averages, over `num_samples` draws ``mu + sigma * eps``, the
    log-likelihood of the batch under the unlinearized network, summed over
    the batch.
    """
    if num_samples < 1:
        raise ValueError('At least one Monte Carlo sample is required.')
    X, y = _check_batch(spec, batch)
    noise = rng.standard_normal((num_samples, spec.num_params))
    return _expected_log_likelihood(q, spec, X, y, likelihood, noise)[0]


def elbo(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
         batch: tuple[np.ndarray, np.ndarray], contexts: ContextBatch,
         likelihood: Likelihood, num_samples: int,
         lin_config: LinearizationConfig, rng: np.random.Generator,
         kl_scale: float = 1.0, data_scale: float = 1.0,
         jitter_schedule: Sequence[float] = DEFAULT_JITTER) -> ElboResult:
    """Evaluate the function-space variational objective.

    ``value = data_scale * ell - kl_scale * fkl`` where `ell` is the
    expected log-likelihood of the batch and `fkl` the supremum estimate
    over `contexts`.
    """
    X, y = _check_batch(spec, batch)
    _check_contexts(contexts)
    if num_samples < 1:
        raise ValueError('At least one Monte Carlo sample is required.')
    noise = _draw_noise(rng, spec, num_samples, len(contexts.sets),
                        lin_config)
    ell = data_scale * _expected_log_likelihood(
        q, spec, X, y, likelihood, noise.likelihood
    )[0]
    supremum = _supremum(q, p, spec, contexts, lin_config, noise.alpha,
                         jitter_schedule)
    diagnostics = ElboDiagnostics(ell, supremum.value, supremum.argmax_index)
    return ElboResult(ell - kl_scale * supremum.value, diagnostics)


def _kl_gradient(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
                 X: np.ndarray, config: LinearizationConfig,
                 alpha_noise: np.ndarray | None, policy: GradPolicy,
                 jitter_schedule: Sequence[float]
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Return d fkl / d mu and d fkl / d sigma at one context set."""
    X = np.asarray(X, dtype=np.float64)
    num_params = spec.num_params
    mu, sigma = q.mu, q.sigma
    shared = p.policy is LinearizationPolicy.SHARED_VARIATIONAL_MEAN
    exact_mode = config.mode is LinearizationMode.EXACT
    if exact_mode:
        alpha = np.arange(0)
        cov_index = np.arange(num_params)
        q_cols = param_jacobian(spec, mu, X)
        alpha_noise = np.zeros((1, 0))
    else:
        partition = config.resolve_partition(spec)
        alpha, cov_index = partition.alpha, partition.beta
        q_cols = beta_jacobian(spec, mu, X, partition)
    # Under the shared policy both covariances use the Jacobian at mu.
    p_cols = q_cols
    pairs = _pushforward_pairs(q, p, spec, X, config, None,
                               None if exact_mode else alpha_noise)

    grad_mu = np.zeros(num_params)
    grad_sigma = np.zeros(num_params)
    variance = sigma[cov_index] ** 2
    prior_offset = p.mean_vector(num_params) - mu
    for (q_comp, p_comp), noise in zip(pairs, alpha_noise):
        kl = gaussian_kl_grad(q_comp, p_comp, jitter_schedule)
        delta = kl.mean_q.reshape(X.shape[0], spec.output_dim)
        pulled = vjp(spec, mu, X, delta)
        grad_mu += pulled
        grad_sigma[alpha] += noise * pulled[alpha]
        cov_pulled = kl.cov_q @ q_cols
        grad_sigma[cov_index] += (2 * sigma[cov_index]
                                  * np.sum(q_cols * cov_pulled, axis=0))
        if policy is not GradPolicy.EXACT_SMALL_NET:
            continue
        # Derivative of the Jacobians themselves, contracted against
        # d fkl / d J.
        q_tangent = np.zeros(num_params)
        q_tangent[alpha] = sigma[alpha] * noise
        weights = np.outer(kl.mean_q, q_tangent)
        weights[:, cov_index] += 2 * cov_pulled * variance
        if shared:
            p_tangent = prior_offset.copy()
            p_tangent[alpha] += np.sqrt(p.variance) * noise
            weights -= np.outer(kl.mean_q, p_tangent)
            weights[:, cov_index] += 2 * p.variance * (kl.cov_p @ p_cols)
        grad_mu += jacobian_contraction_grad(spec, mu, X, weights)
    return grad_mu / len(pairs), grad_sigma / len(pairs)


def elbo_grad(q: VariationalPosterior, p: PriorSpec, spec: MlpSpec,
              batch: tuple[np.ndarray, np.ndarray], contexts: ContextBatch,
              likelihood: Likelihood, num_samples: int,
              lin_config: LinearizationConfig, rng: np.random.Generator,
              kl_scale: float = 1.0,
              grad_policy: GradPolicy = GradPolicy.STOP_GRAD_JACOBIAN,
              data_scale: float = 1.0,
              jitter_schedule: Sequence[float] = DEFAULT_JITTER
              ) -> ElboGradient:
    """Return the gradient of the negative objective w.r.t. (mu, rho).

    The random draws are those of :py:func:`elbo` with an identically
    seeded generator. The supremum is differentiated at its argmax set.

    Under :py:attr:`GradPolicy.STOP_GRAD_JACOBIAN` the Jacobians in both
    pushforwards are held constant: gradients flow through the function
    means, through sigma in the covariance and alpha-sample terms, and
    through the reparameterized likelihood. Under
    :py:attr:`GradPolicy.EXACT_SMALL_NET` the derivative of the Jacobians
    with respect to mu is included as well.

    Raises:
        PolicyViolation: If exact gradients are requested for a network
                         with more than 2000 parameters.
    """
    grad_policy = GradPolicy(grad_policy)
    if (grad_policy is GradPolicy.EXACT_SMALL_NET
            and spec.num_params > EXACT_GRAD_MAX_PARAMS):
        raise PolicyViolation(
            f'Exact gradients need P <= {EXACT_GRAD_MAX_PARAMS}, '
            + f'got P = {spec.num_params}.'
        )
    X, y = _check_batch(spec, batch)
    _check_contexts(contexts)
    if num_samples < 1:
        raise ValueError('At least one Monte Carlo sample is required.')
    noise = _draw_noise(rng, spec, num_samples, len(contexts.sets),
                        lin_config)

    ell, ell_mu, ell_sigma = _expected_log_likelihood(
        q, spec, X, y, likelihood, noise.likelihood, with_grad=True
    )
    supremum = _supremum(q, p, spec, contexts, lin_config, noise.alpha,
                         jitter_schedule)
    logger.debug('Function-space KL %.6g at context set %d of %d',
                 supremum.value, supremum.argmax_index, len(contexts))
    grad_mu = -data_scale * ell_mu
    grad_sigma = -data_scale * ell_sigma
    if kl_scale != 0:
        index = supremum.argmax_index
        try:
            kl_mu, kl_sigma = _kl_gradient(
                q, p, spec, contexts.sets[index], lin_config,
                noise.alpha[index], grad_policy, jitter_schedule
            )
        except FactorizationFailed as error:
            raise error.at_context(index) from error
        grad_mu = grad_mu + kl_scale * kl_mu
        grad_sigma = grad_sigma + kl_scale * kl_sigma

    diagnostics = ElboDiagnostics(data_scale * ell, supremum.value,
                                  supremum.argmax_index)
    value = data_scale * ell - kl_scale * supremum.value
    return ElboGradient(grad_mu, grad_sigma * expit(q.rho), value,
                        diagnostics)
