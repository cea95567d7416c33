import sys

import numpy as np
import pytest

from aumn.model import ModelDims, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return ModelDims(D=6, F=8, C=3, K=4, m=2, r=3, kernel=3)


@pytest.fixture
def small_params(small_dims, rng):
    params = init_params(small_dims, rng)
    # non-zero biases exercise every affine term
    return params.replace(**{
        name: rng.normal(0.0, 0.2, size=arr.shape)
        for name, arr in params.tensors().items() if name.startswith("b_")
    })


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
