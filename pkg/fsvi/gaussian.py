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
"""Gaussian distributions and the linear algebra they need.

Two families are used throughout FSVI: :py:class:`DiagonalGaussian`, a
mean-field Gaussian over a flat parameter vector, and
:py:class:`FunctionGaussian`, a dense multivariate Gaussian over network
outputs at a finite set of evaluation points. All computations are done in
double precision.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky as _cholesky
from scipy.linalg import solve_triangular

from fsvi.errors import DimensionMismatch, FactorizationFailed, NegativeKL

logger = logging.getLogger(__name__)

DEFAULT_JITTER: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
"""Escalating diagonal jitter tried by :py:func:`cholesky`."""
KL_TOLERANCE = 1e-8
"""Largest round-off below zero a KL divergence is clamped from."""
SYMMETRY_TOLERANCE = 1e-8


def _frozen(array: np.ndarray) -> np.ndarray:
    """Return a read-only float64 copy of `array`."""
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """A mean-field Gaussian distribution over a flat vector.

    Zero variances are allowed so that degenerate (deterministic)
    coordinates can be pushed through a network; the KL divergences
    require strictly positive variances.
    """

    mean: np.ndarray
    """Mean vector of length P."""
    variance: np.ndarray
    """Elementwise variances, same length as :py:attr:`mean`."""

    def __post_init__(self) -> None:
        """Check shapes and non-negativity, and freeze the arrays."""
        mean = _frozen(self.mean)
        variance = _frozen(self.variance)
        if mean.ndim != 1 or variance.shape != mean.shape:
            raise DimensionMismatch(
                f'Mean of shape {mean.shape} and variance of shape '
                + f'{variance.shape} do not describe a diagonal Gaussian.'
            )
        if np.any(variance < 0) or not np.all(np.isfinite(variance)):
            raise ValueError('Variances must be finite and non-negative.')
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'variance', variance)

    def __len__(self) -> int:
        """Return the number of coordinates."""
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw `count` samples, returned as rows of a `count` x P array."""
        noise = rng.standard_normal((count, len(self)))
        return self.mean + np.sqrt(self.variance) * noise


@dataclass(frozen=True, eq=False)
class FunctionGaussian:
    """A multivariate Gaussian over network outputs.

    The outputs of N evaluation points and Q network outputs are flattened
    point-major, so entry ``i * Q + q`` is output `q` at point `i`.
    """

    mean: np.ndarray
    """Mean vector of length N * Q."""
    covariance: np.ndarray
    """Symmetric positive semi-definite covariance matrix."""

    def __post_init__(self) -> None:
        """Check shapes and symmetry, and freeze the arrays."""
        mean = _frozen(self.mean)
        covariance = _frozen(self.covariance)
        if mean.ndim != 1 or covariance.shape != (mean.shape[0],) * 2:
            raise DimensionMismatch(
                f'Mean of shape {mean.shape} and covariance of shape '
                + f'{covariance.shape} do not describe a Gaussian.'
            )
        if not np.allclose(covariance, covariance.T, rtol=0.0,
                           atol=SYMMETRY_TOLERANCE):
            raise ValueError('Covariance matrix must be symmetric.')
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'covariance', covariance)

    @property
    def dim(self) -> int:
        """Return the dimension of the distribution."""
        return self.mean.shape[0]

    @classmethod
    def from_diagonal(cls, gaussian: DiagonalGaussian) -> FunctionGaussian:
        """Lift a diagonal Gaussian to a dense one."""
        return cls(gaussian.mean, np.diag(gaussian.variance))

    def sample(self, rng: np.random.Generator, count: int,
               jitter_schedule: Sequence[float] = DEFAULT_JITTER
               ) -> np.ndarray:
        """Draw `count` samples, returned as rows of a `count` x k array.

        An all-zero covariance is sampled without factorizing it: every
        draw equals the mean.
        """
        noise = rng.standard_normal((count, self.dim))
        if not np.any(self.covariance):
            return np.broadcast_to(self.mean, noise.shape).copy()
        factor = cholesky(self.covariance, jitter_schedule).factor
        return self.mean + noise @ factor.T


@dataclass(frozen=True, eq=False)
class CholeskyResult:
    """A lower-triangular Cholesky factor and the jitter it needed."""

    factor: np.ndarray
    """Lower triangular L with L L^T = matrix + jitter * I."""
    jitter: float
    """The diagonal jitter that was added."""


def cholesky(matrix: np.ndarray,
             jitter_schedule: Sequence[float] = DEFAULT_JITTER
             ) -> CholeskyResult:
    """Cholesky-factorize a symmetric matrix, escalating jitter on failure.

    Args:
        matrix: A square symmetric matrix.
        jitter_schedule: Diagonal jitter levels, tried in order.

    Returns:
        result: The factor for the first jitter level that succeeds.

    Raises:
        FactorizationFailed: If every jitter level fails.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatch(
            f'Cannot factorize a matrix of shape {matrix.shape}.'
        )
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=SYMMETRY_TOLERANCE):
        raise ValueError('Cannot Cholesky-factorize a non-symmetric matrix.')
    if not jitter_schedule:
        raise ValueError('Jitter schedule must not be empty.')
    identity = np.eye(matrix.shape[0])
    for jitter in jitter_schedule:
        try:
            factor = _cholesky(matrix + jitter * identity, lower=True)
        except LinAlgError:
            continue
        if jitter > 0:
            logger.debug('Cholesky of %d x %d matrix needed jitter %g',
                         matrix.shape[0], matrix.shape[0], jitter)
        return CholeskyResult(factor, float(jitter))
    raise FactorizationFailed(matrix.shape[0], float(max(jitter_schedule)))


def log_det_from_cholesky(factor: np.ndarray) -> float:
    """Return the log-determinant of L L^T given its Cholesky factor L."""
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def _clamp_kl(value: float) -> float:
    """Clamp round-off below zero, rejecting anything larger."""
    if value < -KL_TOLERANCE:
        raise NegativeKL(f'KL divergence evaluated to {value:g} < 0.')
    return max(value, 0.0)


def _check_dims(q: FunctionGaussian, p: FunctionGaussian) -> None:
    if q.dim != p.dim:
        raise DimensionMismatch(
            f'Cannot compare Gaussians of dimension {q.dim} and {p.dim}.'
        )


def gaussian_kl(q: FunctionGaussian, p: FunctionGaussian,
                jitter_schedule: Sequence[float] = DEFAULT_JITTER) -> float:
    """Return KL(q || p) in nats between two multivariate Gaussians.

    Both covariances are factorized with :py:func:`cholesky`, and the
    divergence is that between the two jittered Gaussians.

    Raises:
        DimensionMismatch: If `q` and `p` have different dimensions.
        FactorizationFailed: If either covariance cannot be factorized.
        NegativeKL: If round-off pushes the result below -1e-8.
    """
    _check_dims(q, p)
    chol_p = cholesky(p.covariance, jitter_schedule).factor
    chol_q = cholesky(q.covariance, jitter_schedule).factor
    # tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    whitened_q = solve_triangular(chol_p, chol_q, lower=True)
    whitened_diff = solve_triangular(chol_p, p.mean - q.mean, lower=True)
    value = 0.5 * (np.sum(whitened_q ** 2)
                   + np.sum(whitened_diff ** 2)
                   - q.dim
                   + log_det_from_cholesky(chol_p)
                   - log_det_from_cholesky(chol_q))
    return _clamp_kl(float(value))


@dataclass(frozen=True, eq=False)
class KLGradient:
    """KL(q || p) together with its derivatives.

    Attributes:
        value: The divergence, as returned by :py:func:`gaussian_kl`.
        mean_q: Derivative with respect to the mean of `q` (the negative
                of the derivative with respect to the mean of `p`).
        cov_q: Derivative with respect to the covariance of `q`.
        cov_p: Derivative with respect to the covariance of `p`.
    """

    value: float
    mean_q: np.ndarray
    cov_q: np.ndarray
    cov_p: np.ndarray


def gaussian_kl_grad(q: FunctionGaussian, p: FunctionGaussian,
                     jitter_schedule: Sequence[float] = DEFAULT_JITTER
                     ) -> KLGradient:
    """Return KL(q || p) and its derivatives with respect to both moments.

    The jitter chosen for each covariance is treated as a constant, so the
    derivatives are those of the divergence between the jittered Gaussians.
    """
    _check_dims(q, p)
    chol_p = cholesky(p.covariance, jitter_schedule)
    chol_q = cholesky(q.covariance, jitter_schedule)
    identity = np.eye(q.dim)
    prec_p = cho_solve((chol_p.factor, True), identity)
    prec_q = cho_solve((chol_q.factor, True), identity)
    cov_q = q.covariance + chol_q.jitter * identity
    diff = q.mean - p.mean
    scaled_diff = prec_p @ diff

    value = 0.5 * (np.sum(prec_p * cov_q)
                   + diff @ scaled_diff
                   - q.dim
                   + log_det_from_cholesky(chol_p.factor)
                   - log_det_from_cholesky(chol_q.factor))
    grad_cov_q = 0.5 * (prec_p - prec_q)
    grad_cov_p = 0.5 * (prec_p - prec_p @ cov_q @ prec_p
                        - np.outer(scaled_diff, scaled_diff))
    return KLGradient(_clamp_kl(float(value)), scaled_diff,
                      0.5 * (grad_cov_q + grad_cov_q.T),
                      0.5 * (grad_cov_p + grad_cov_p.T))


def diag_gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> float:
    """Return KL(q || p) between two mean-field Gaussians.

    This is the parameter-space divergence, which upper-bounds the
    divergence between any pushforwards of `q` and `p` through a shared map.
    """
    if len(q) != len(p):
        raise DimensionMismatch(
            f'Cannot compare Gaussians of length {len(q)} and {len(p)}.'
        )
    if np.any(p.variance <= 0) or np.any(q.variance <= 0):
        raise ValueError('KL divergence requires positive variances.')
    ratio = q.variance / p.variance
    value = 0.5 * np.sum(ratio + (p.mean - q.mean) ** 2 / p.variance
                         - 1.0 - np.log(ratio))
    return _clamp_kl(float(value))


def sample(dist: DiagonalGaussian | FunctionGaussian,
           rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw `count` samples from either Gaussian family."""
    return dist.sample(rng, count)
