import math

import numpy as np
import pytest

from maglab.geometry import ChartMetric
from maglab.magnetic import FieldStrength, MagneticSystem


@pytest.fixture
def flat0():
    return MagneticSystem.constant(ChartMetric.euclidean(), 0.0)


@pytest.fixture
def flat1():
    return MagneticSystem.constant(ChartMetric.euclidean(), 1.0)


@pytest.fixture
def sphere0():
    return MagneticSystem.constant(ChartMetric.spherical(1.0), 0.0)


@pytest.fixture
def gaussian_field():
    return MagneticSystem(ChartMetric.euclidean(), FieldStrength(expression="2*exp(-(x^2+y^2)/0.5)"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_points(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([r * np.cos(a), r * np.sin(a)], -1)
