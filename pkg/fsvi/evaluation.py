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
"""Posterior predictive distributions and uncertainty metrics.

The predictive averages the likelihood over parameter draws from the
variational posterior, evaluated with the full (unlinearized) network. The
metrics cover fit (NLL, RMSE, accuracy), calibration (ECE, Brier score),
out-of-distribution separation (AUROC of predictive entropy) and selective
prediction.
"""
from __future__ import annotations
from dataclasses import dataclass, field
import json
import logging
import math
import os
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import entr, softmax
from scipy.stats import mannwhitneyu

from fsvi.data import Standardization, atomic_write
from fsvi.errors import DimensionMismatch, EmptyInput, EmptyRetainedSet
from fsvi.neuralnetwork import MlpSpec, forward
from fsvi.objective import Likelihood, VariationalPosterior

logger = logging.getLogger(__name__)

DEFAULT_EVAL_SAMPLES = 50
"""Default number of posterior draws M* for the predictive."""
DEFAULT_BINS = 10
DEFAULT_REFERRAL_RATES: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True, eq=False)
class PredictiveOutput:
    """The posterior predictive at N points.

    Regression predictives carry `mean` and `variance` (N x Q);
    classification predictives carry `probs`, the mean softmax
    probabilities, and `prob_variance`, their spread across draws.
    """

    likelihood: Likelihood
    mean: np.ndarray | None = None
    variance: np.ndarray | None = None
    probs: np.ndarray | None = None
    prob_variance: np.ndarray | None = None
    entropy: np.ndarray = field(init=False)
    """Per-point predictive entropy in nats (differential for regression)."""

    def __post_init__(self) -> None:
        """Compute the per-point entropy."""
        if self.likelihood.is_regression:
            if self.mean is None or self.variance is None:
                raise ValueError('Regression predictives need mean and '
                                 'variance.')
            entropy = 0.5 * np.sum(np.log(2 * np.pi * np.e * self.variance),
                                   axis=1)
        else:
            if self.probs is None:
                raise ValueError('Classification predictives need probs.')
            entropy = predictive_entropy(self.probs)
        object.__setattr__(self, 'entropy', entropy)

    def __len__(self) -> int:
        """Return the number of points."""
        return self.entropy.shape[0]

    def with_rows(self, indices: np.ndarray) -> PredictiveOutput:
        """Return the predictive at a subset of the points."""
        def pick(array: np.ndarray | None) -> np.ndarray | None:
            return None if array is None else array[indices]
        return PredictiveOutput(self.likelihood, pick(self.mean),
                                pick(self.variance), pick(self.probs),
                                pick(self.prob_variance))

    def unstandardized(self, stats: Standardization | None
                       ) -> PredictiveOutput:
        """Map a regression predictive back to original target units."""
        if stats is None or not self.likelihood.is_regression:
            return self
        return PredictiveOutput(self.likelihood,
                                mean=stats.inverse_y(self.mean),
                                variance=self.variance * stats.y_scale ** 2)


def _aggregate(outputs: np.ndarray,
               likelihood: Likelihood) -> PredictiveOutput:
    """Aggregate M x N x Q network outputs into a predictive."""
    if likelihood.is_regression:
        return PredictiveOutput(
            likelihood, mean=outputs.mean(axis=0),
            variance=likelihood.noise_variance + outputs.var(axis=0)
        )
    draws = softmax(outputs, axis=2)
    probs = draws.mean(axis=0)
    probs /= probs.sum(axis=1, keepdims=True)
    return PredictiveOutput(likelihood, probs=probs,
                            prob_variance=draws.var(axis=0))


def posterior_predictive(q: VariationalPosterior, spec: MlpSpec,
                         X: np.ndarray, likelihood: Likelihood,
                         num_samples: int, rng: np.random.Generator
                         ) -> PredictiveOutput:
    """Return the Monte Carlo posterior predictive at the rows of `X`.

    Args:
        q: The variational posterior.
        spec: The network architecture.
        X: The N x D evaluation points.
        likelihood: The observation model.
        num_samples: M*, the number of parameter draws.
        rng: Source of the parameter draws.

    Returns:
        predictive: For regression, the mean of the draws' outputs with
                    variance ``noise_variance`` plus the between-draw
                    variance; for classification, the mean of the draws'
                    softmax probabilities.
    """
    if num_samples < 1:
        raise ValueError('At least one predictive sample is required.')
    thetas = q.sample(rng, num_samples)
    outputs = np.stack([forward(spec, theta, X) for theta in thetas])
    return _aggregate(outputs, likelihood)


def ensemble_predictive(spec: MlpSpec, members: Sequence[np.ndarray],
                        X: np.ndarray,
                        likelihood: Likelihood) -> PredictiveOutput:
    """Return the equal-weight predictive of deterministic networks."""
    if not members:
        raise ValueError('An ensemble needs at least one member.')
    outputs = np.stack([forward(spec, params, X) for params in members])
    return _aggregate(outputs, likelihood)


def _probs_and_labels(probs: np.ndarray, labels: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.intp)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptyInput('Metrics need at least one prediction.')
    if labels.shape[0] != probs.shape[0]:
        raise DimensionMismatch(
            f'{labels.shape[0]} labels for {probs.shape[0]} predictions.'
        )
    return probs, labels


def ece(probs: np.ndarray, labels: np.ndarray,
        bins: int = DEFAULT_BINS) -> float:
    """Return the expected calibration error over equal-width bins.

    Confidence is the largest class probability. Bins are half-open
    ``[k / bins, (k + 1) / bins)`` except the last, which also holds 1.
    """
    probs, labels = _probs_and_labels(probs, labels)
    if bins < 1:
        raise ValueError('ECE needs at least one bin.')
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    index = np.minimum((confidence * bins).astype(np.intp), bins - 1)
    gap = (np.bincount(index, weights=correct, minlength=bins)
           - np.bincount(index, weights=confidence, minlength=bins))
    return float(min(max(np.abs(gap).sum() / probs.shape[0], 0.0), 1.0))


def auroc(scores_in: Sequence[float], scores_out: Sequence[float]) -> float:
    """Return P(out > in) + P(out = in) / 2 over all pairs of scores.

    Out-of-distribution points are the positive class. The Mann-Whitney U
    statistic counts the pairs exactly.
    """
    scores_in = np.asarray(scores_in, dtype=np.float64).ravel()
    scores_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if scores_in.size == 0 or scores_out.size == 0:
        raise EmptyInput('AUROC needs in- and out-of-distribution scores.')
    statistic = mannwhitneyu(scores_out, scores_in,
                             method='asymptotic').statistic
    return float(statistic / (scores_in.size * scores_out.size))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Return the N x `num_classes` one-hot encoding of `labels`."""
    labels = np.asarray(labels).reshape(-1).astype(np.intp)
    return np.eye(num_classes)[labels]


def brier(probs: np.ndarray, one_hot_labels: np.ndarray) -> float:
    """Return the mean squared distance between predictions and labels."""
    probs = np.asarray(probs, dtype=np.float64)
    one_hot_labels = np.asarray(one_hot_labels, dtype=np.float64)
    if probs.shape != one_hot_labels.shape:
        raise DimensionMismatch(
            f'Predictions of shape {probs.shape} and labels of shape '
            + f'{one_hot_labels.shape} differ.'
        )
    if probs.shape[0] == 0:
        raise EmptyInput('Brier score needs at least one prediction.')
    return float(np.mean(np.sum((probs - one_hot_labels) ** 2, axis=1)))


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Return the per-row entropy in nats, with 0 log 0 = 0."""
    return np.maximum(np.sum(entr(np.asarray(probs, dtype=np.float64)),
                             axis=1), 0.0)


def _num_referred(rate: float, num_points: int) -> int:
    """Return ceil(rate * N), ignoring round-off just above an integer."""
    return math.ceil(round(rate * num_points, 9))


def selective_prediction(uncertainty: np.ndarray,
                         metric_fn: Callable[[np.ndarray], float],
                         referral_rates: Sequence[float] = (
                             DEFAULT_REFERRAL_RATES)
                         ) -> list[tuple[float, float]]:
    """Score the retained points after referring the most uncertain ones.

    For every rate ``g`` the ``ceil(g * N)`` most uncertain points are
    dropped, the higher index first among ties, and `metric_fn` is called
    with the sorted indices of the retained points.

    Returns:
        table: ``(rate, metric)`` pairs in the order of `referral_rates`.

    Raises:
        EmptyRetainedSet: If a rate leaves no points.
    """
    uncertainty = np.asarray(uncertainty, dtype=np.float64).ravel()
    rates = [float(rate) for rate in referral_rates]
    if any(not 0.0 <= rate < 1.0 for rate in rates):
        raise ValueError('Referral rates must lie in [0, 1).')
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError('Referral rates must be strictly increasing.')
    num_points = uncertainty.shape[0]
    order = np.lexsort((np.arange(num_points), uncertainty))
    table = []
    for rate in rates:
        kept = num_points - _num_referred(rate, num_points)
        if kept <= 0:
            raise EmptyRetainedSet(
                f'Referral rate {rate:g} leaves no points of {num_points}.'
            )
        table.append((rate, float(metric_fn(np.sort(order[:kept])))))
    return table


def nll(predictive: PredictiveOutput, targets: np.ndarray) -> float:
    """Return the mean negative log predictive density per point."""
    if predictive.likelihood.is_regression:
        targets = np.asarray(targets, dtype=np.float64).reshape(
            predictive.mean.shape
        )
        density = -0.5 * np.sum(
            np.log(2 * np.pi * predictive.variance)
            + (targets - predictive.mean) ** 2 / predictive.variance, axis=1
        )
        return float(-np.mean(density))
    probs, labels = _probs_and_labels(predictive.probs, targets)
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))


def rmse(predictive: PredictiveOutput, targets: np.ndarray) -> float:
    """Return the root mean squared error of the predictive mean."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size != predictive.mean.size:
        raise DimensionMismatch(
            f'{targets.size} targets for {predictive.mean.size} outputs.'
        )
    residual = predictive.mean - targets.reshape(predictive.mean.shape)
    return float(np.sqrt(np.mean(residual ** 2)))


def accuracy(predictive: PredictiveOutput, labels: np.ndarray) -> float:
    """Return the fraction of points whose most probable class is right."""
    probs, labels = _probs_and_labels(predictive.probs, labels)
    return float(np.mean(probs.argmax(axis=1) == labels))


@dataclass(frozen=True)
class MetricsReport:
    """All metrics of one evaluation.

    Fields that do not apply to the likelihood (or need an OOD set that was
    not given) are ``None`` and left out of the JSON.
    """

    num_points: int
    nll: float
    mean_entropy: float
    rmse: float | None = None
    accuracy: float | None = None
    ece: float | None = None
    brier: float | None = None
    auroc: float | None = None
    selective_metric: str = ''
    """Name of the metric in the selective-prediction table."""
    selective: tuple[tuple[float, float], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        """Return the scalar metrics as a flat dictionary."""
        values = {'num_points': self.num_points, 'nll': self.nll,
                  'mean_entropy': self.mean_entropy, 'rmse': self.rmse,
                  'accuracy': self.accuracy, 'ece': self.ece,
                  'brier': self.brier, 'auroc': self.auroc}
        return {key: value for key, value in values.items()
                if value is not None}

    def to_json(self) -> str:
        """Return the flat JSON object of :py:meth:`to_dict`."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def selective_frame(self) -> pd.DataFrame:
        """Return the selective-prediction table as a data frame."""
        return pd.DataFrame(list(self.selective),
                            columns=['referral_rate', 'metric'])


def selective_table_csv(report: MetricsReport,
                        path: str | os.PathLike) -> None:
    """Write the selective-prediction table of `report` as CSV, atomically."""
    with atomic_write(path) as handle:
        report.selective_frame().to_csv(handle, index=False,
                                        float_format='%.17g')


def evaluate(predictive: PredictiveOutput, targets: np.ndarray,
             stats: Standardization | None = None,
             ood_predictive: PredictiveOutput | None = None,
             referral_rates: Sequence[float] = DEFAULT_REFERRAL_RATES,
             bins: int = DEFAULT_BINS) -> MetricsReport:
    """Compute every applicable metric of a predictive.

    Regression predictives and targets are mapped back to original units
    with `stats` before NLL and RMSE are taken; their selective table
    reports RMSE. Classification reports accuracy, ECE and Brier score and
    a selective table of accuracy. With `ood_predictive`, the AUROC of
    predictive entropy separating the two sets is included.
    """
    if len(predictive) == 0:
        raise EmptyInput('Cannot evaluate an empty predictive.')
    targets = np.asarray(targets, dtype=np.float64)
    auroc_value = None
    if ood_predictive is not None:
        auroc_value = auroc(predictive.entropy, ood_predictive.entropy)

    if predictive.likelihood.is_regression:
        if stats is not None:
            predictive = predictive.unstandardized(stats)
            targets = stats.inverse_y(targets.reshape(predictive.mean.shape))

        def metric(kept: np.ndarray) -> float:
            return rmse(predictive.with_rows(kept), targets[kept])

        report = MetricsReport(
            len(predictive), nll(predictive, targets),
            float(np.mean(predictive.entropy)),
            rmse=rmse(predictive, targets), auroc=auroc_value,
            selective_metric='rmse',
            selective=tuple(selective_prediction(
                predictive.variance.sum(axis=1), metric, referral_rates
            ))
        )
    else:
        labels = targets.reshape(-1).astype(np.intp)
        probs = predictive.probs

        def metric(kept: np.ndarray) -> float:
            return float(np.mean(probs[kept].argmax(axis=1) == labels[kept]))

        report = MetricsReport(
            len(predictive), nll(predictive, labels),
            float(np.mean(predictive.entropy)),
            accuracy=accuracy(predictive, labels),
            ece=ece(probs, labels, bins),
            brier=brier(probs, one_hot(labels, probs.shape[1])),
            auroc=auroc_value, selective_metric='accuracy',
            selective=tuple(selective_prediction(
                predictive.entropy, metric, referral_rates
            ))
        )
    logger.info('Evaluated %d points: nll=%.4f', report.num_points,
                report.nll)
    return report
