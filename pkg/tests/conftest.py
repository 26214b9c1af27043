import warnings

import numpy as np
import pytest

from saddlemix import problems
from saddlemix.hfo import DescentWarning


class NanProblem(problems.FiniteSumProblem):
    """Three components; component 1 returns NaN."""

    def __init__(self):
        self.n, self.d = 3, 2
        self.lipschitz_grad = self.lipschitz_hess = 1.0

    def value_grad(self, i, x):
        if i == 1:
            return float("nan"), np.full(2, np.nan)
        return float(x @ x), 2 * x

    def hvp(self, i, x, v):
        return np.full(2, np.nan) if i == 1 else 2 * v


@pytest.fixture
def nan_problem():
    return NanProblem()


@pytest.fixture(scope="session")
def synthetic_small():
    return problems.generate_synthetic(20, 8, seed=3)


@pytest.fixture
def quiet_descent():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DescentWarning)
        yield
