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
"""Exceptions raised by FSVI.

Argument-validation errors subclass :py:class:`ValueError` as well as
:py:class:`FSVIError`, so callers that only expect the builtin exception
keep working. Numerical failures subclass :py:class:`ArithmeticError`.
"""
from __future__ import annotations


class FSVIError(Exception):
    """Base class for all FSVI errors."""


class DimensionMismatch(FSVIError, ValueError):
    """Array shapes are incompatible with each other or with a network."""


class FactorizationFailed(FSVIError, ArithmeticError):
    """A Cholesky factorization failed at every jitter level.

    Attributes:
        dim: The dimension of the matrix that could not be factorized.
        jitter: The largest jitter that was tried.
        context_index: Index of the context set whose covariance failed,
                       when known (filled in by the training loop).
    """

    def __init__(self, dim: int, jitter: float,
                 context_index: int | None = None) -> None:
        """Initialize a :py:class:`FactorizationFailed`."""
        self.dim = dim
        self.jitter = jitter
        self.context_index = context_index
        super().__init__(self._message())

    def _message(self) -> str:
        message = (f'Cholesky factorization of a {self.dim}x{self.dim} '
                   + f'matrix failed with jitter up to {self.jitter:g}')
        if self.context_index is not None:
            message += f' (context set {self.context_index})'
        return message

    def at_context(self, index: int) -> FactorizationFailed:
        """Return a copy of this error naming the offending context set."""
        return FactorizationFailed(self.dim, self.jitter, index)


class NegativeKL(FSVIError, ArithmeticError):
    """A KL divergence came out more negative than round-off allows."""


class PolicyViolation(FSVIError, ValueError):
    """A gradient policy was requested where it is not permitted."""


class EmptyData(FSVIError, ValueError):
    """An operation that needs at least one row received none."""


class EmptyPool(FSVIError, ValueError):
    """A monochrome pixel pool has an empty channel."""


class EmptyInput(FSVIError, ValueError):
    """A metric received an empty input."""


class EmptyRetainedSet(FSVIError, ValueError):
    """A referral rate leaves no points to evaluate."""


class InvalidFractions(FSVIError, ValueError):
    """Split fractions are negative or do not sum to one."""


class ParseError(FSVIError, ValueError):
    """A CSV file could not be parsed.

    Attributes:
        line: The 1-based line number of the offending line, if known.
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        """Initialize a :py:class:`ParseError`."""
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)


class RaggedRows(ParseError):
    """A CSV row has a different number of cells than the first row."""


class ConfigError(FSVIError, ValueError):
    """A run configuration is malformed."""


class CheckpointError(FSVIError, ValueError):
    """A checkpoint file is unreadable or corrupt."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint file does not start with the expected magic header."""
