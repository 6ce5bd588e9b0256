import numpy as np
import pytest

from parabolic_mvf.fields import ExactGaussianField
from parabolic_mvf.operator_model import make_operator


@pytest.fixture(scope="session")
def heat1():
    return make_operator("heat", 1)


@pytest.fixture(scope="session")
def heat2():
    return make_operator("heat", 2)


@pytest.fixture(scope="session")
def heat_field1(heat1):
    return ExactGaussianField(heat1, [0.0], 0.0)


@pytest.fixture(scope="session")
def heat_field2(heat2):
    return ExactGaussianField(heat2, [0.0, 0.0], 0.0)


@pytest.fixture(scope="session")
def trig1():
    return make_operator("trig_perturbed", 1, {"epsilon": 0.1})


@pytest.fixture(scope="session")
def trig_field(trig1):
    from parabolic_mvf.parametrix_series import SeriesConfig, SeriesField
    return SeriesField(trig1, [0.0], 0.0, SeriesConfig(K=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
