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
"""Pushforwards of parameter Gaussians through a linearized network.

Linearizing ``f(X; theta)`` about a point ``m`` gives the affine map
``f(X; m) + J(X; m)(theta - m)``, under which a Gaussian over parameters
becomes a Gaussian over outputs. :py:func:`push_forward_exact` forms the full
Jacobian; :py:func:`push_forward_mc` samples the (large) alpha block of
parameters and only forms the Jacobian columns of the (small) beta block.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from fsvi.errors import DimensionMismatch
from fsvi.gaussian import DiagonalGaussian, FunctionGaussian
from fsvi.neuralnetwork import (
    MlpSpec, Partition, final_layer_jacobian, forward, jvp, param_jacobian
)


class LinearizationMode(StrEnum):
    """How a parameter Gaussian is pushed through the linearized network."""

    EXACT = 'exact'
    MC_PARTITION = 'mc_partition'


@dataclass(frozen=True)
class LinearizationConfig:
    """Settings for the function-space pushforward."""

    mode: LinearizationMode = LinearizationMode.MC_PARTITION
    num_samples: int = 1
    """R, the number of Monte Carlo samples of the alpha block."""
    partition: Partition | None = field(default=None, compare=False)
    """The alpha/beta split; ``None`` selects :py:meth:`Partition.default`."""

    def __post_init__(self) -> None:
        """Validate the configuration."""
        object.__setattr__(self, 'mode', LinearizationMode(self.mode))
        if int(self.num_samples) < 1:
            raise ValueError('At least one Monte Carlo sample is required.')
        object.__setattr__(self, 'num_samples', int(self.num_samples))

    def resolve_partition(self, spec: MlpSpec) -> Partition:
        """Return the partition to use for `spec`."""
        partition = self.partition or Partition.default(spec)
        if partition.num_params != spec.num_params:
            raise DimensionMismatch(
                f'Partition over {partition.num_params} parameters does not '
                + f'match a network with {spec.num_params}.'
            )
        return partition


def _check(g: DiagonalGaussian, spec: MlpSpec,
           point: np.ndarray | None) -> np.ndarray:
    if len(g) != spec.num_params:
        raise DimensionMismatch(
            f'Gaussian over {len(g)} parameters does not match a network '
            + f'with {spec.num_params}.'
        )
    if point is None:
        return g.mean
    point = np.asarray(point, dtype=np.float64)
    if point.shape != g.mean.shape:
        raise DimensionMismatch('Linearization point has the wrong length.')
    return point


def _linearized_mean(g: DiagonalGaussian, spec: MlpSpec, X: np.ndarray,
                     point: np.ndarray) -> np.ndarray:
    """Return f(X; point) + J(X; point)(mean - point), shape N x Q."""
    mean = forward(spec, point, X)
    offset = g.mean - point
    if np.any(offset):
        mean = mean + jvp(spec, point, X, offset)
    return mean


def beta_jacobian(spec: MlpSpec, params: np.ndarray, X: np.ndarray,
                  partition: Partition) -> np.ndarray:
    """Return the Jacobian columns of the beta block.

    The closed-form :py:func:`final_layer_jacobian` is used whenever beta is
    exactly the final layer.
    """
    if partition.is_final_layer(spec):
        return final_layer_jacobian(spec, params, X)
    return param_jacobian(spec, params, X)[:, partition.beta]


def push_forward_exact(g: DiagonalGaussian, spec: MlpSpec, X: np.ndarray,
                       linearization_point: np.ndarray | None = None
                       ) -> FunctionGaussian:
    """Push `g` through the network linearized about `linearization_point`.

    Args:
        g: The parameter distribution.
        spec: The network architecture.
        X: The N x D evaluation points.
        linearization_point: Where to linearize; defaults to ``g.mean``.

    Returns:
        pushforward: ``N(f(X; m) + J (g.mean - m), J diag(g.variance) J^T)``
                     with J evaluated at the linearization point m.
    """
    point = _check(g, spec, linearization_point)
    jacobian = param_jacobian(spec, point, X)
    covariance = (jacobian * g.variance) @ jacobian.T
    return FunctionGaussian(_linearized_mean(g, spec, X, point).ravel(),
                            0.5 * (covariance + covariance.T))


def push_forward_mc(g: DiagonalGaussian, spec: MlpSpec, X: np.ndarray,
                    config: LinearizationConfig, rng: np.random.Generator,
                    linearization_point: np.ndarray | None = None,
                    alpha_noise: np.ndarray | None = None
                    ) -> list[FunctionGaussian]:
    """Approximate the linearized pushforward by an equal-weight mixture.

    Each of the R components samples the alpha block,
    ``theta_alpha = m_alpha + sqrt(S_alpha) * eps``, shifts the mean by the
    directional derivative ``J_alpha (theta_alpha - m_alpha)`` and keeps the
    beta block in closed form, with covariance
    ``J_beta diag(S_beta) J_beta^T``.

    Args:
        g: The parameter distribution.
        spec: The network architecture.
        X: The N x D evaluation points.
        config: Number of samples and the alpha/beta partition.
        rng: Source of the alpha-block noise.
        linearization_point: Where to linearize; defaults to ``g.mean``.
        alpha_noise: Optional pre-drawn standard-normal noise of shape
                     (R, |alpha|); when given, `rng` is not used.

    Returns:
        components: R Gaussians, ordered by sample index.
    """
    point = _check(g, spec, linearization_point)
    partition = config.resolve_partition(spec)
    num_samples = config.num_samples
    if alpha_noise is None:
        alpha_noise = rng.standard_normal((num_samples,
                                           partition.alpha.size))
    alpha_noise = np.asarray(alpha_noise, dtype=np.float64)
    if alpha_noise.shape != (num_samples, partition.alpha.size):
        raise DimensionMismatch(
            f'Alpha noise of shape {alpha_noise.shape} does not match '
            + f'{(num_samples, partition.alpha.size)}.'
        )

    jacobian = beta_jacobian(spec, point, X, partition)
    covariance = (jacobian * g.variance[partition.beta]) @ jacobian.T
    covariance = 0.5 * (covariance + covariance.T)
    base = _linearized_mean(g, spec, X, point)
    alpha_scale = np.sqrt(g.variance[partition.alpha])

    components = []
    tangent = np.zeros(spec.num_params)
    for noise in alpha_noise:
        tangent[partition.alpha] = alpha_scale * noise
        mean = base
        if np.any(tangent):
            mean = base + jvp(spec, point, X, tangent)
        components.append(FunctionGaussian(mean.ravel(), covariance))
    return components


@dataclass(frozen=True, eq=False)
class MixtureMoments:
    """First two moments of an equal-weight Gaussian mixture."""

    mean: np.ndarray
    within: np.ndarray
    """Average of the component covariances."""
    between: np.ndarray
    """Covariance of the component means."""

    @property
    def covariance(self) -> np.ndarray:
        """Return the total covariance, within plus between."""
        return self.within + self.between

    def as_gaussian(self) -> FunctionGaussian:
        """Return the moment-matched Gaussian."""
        covariance = self.covariance
        return FunctionGaussian(self.mean, 0.5 * (covariance + covariance.T))


def mixture_moments(components: list[FunctionGaussian]) -> MixtureMoments:
    """Return the mean and covariance of an equal-weight mixture."""
    if not components:
        raise ValueError('A mixture needs at least one component.')
    means = np.stack([c.mean for c in components])
    within = np.mean([c.covariance for c in components], axis=0)
    centred = means - means.mean(axis=0)
    between = centred.T @ centred / len(components)
    return MixtureMoments(means.mean(axis=0), within, between)
