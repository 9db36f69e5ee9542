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
"""Shared fixtures for the FSVI test suite."""
import numpy as np
import pytest

from fsvi.neuralnetwork import MlpSpec


@pytest.fixture
def rng():
    """Return a freshly seeded generator."""
    return np.random.default_rng(20240611)


@pytest.fixture
def small_spec():
    """Return a 2-4-2 tanh network (22 parameters)."""
    return MlpSpec.build(2, [4], 2)


@pytest.fixture
def regression_spec():
    """Return a 1-3-1 tanh network (10 parameters)."""
    return MlpSpec.build(1, [3], 1)


def central_difference(fn, x, eps=1e-6):
    """Return the central finite-difference gradient of scalar `fn` at `x`."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in range(x.size):
        step = np.zeros_like(x)
        step.flat[index] = eps
        grad.flat[index] = (fn(x + step) - fn(x - step)) / (2 * eps)
    return grad
