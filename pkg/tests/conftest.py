import numpy as np
import pytest

from activemle import (
    LinearRegressionFamily,
    LogisticRegressionFamily,
    MultinomialLogisticFamily,
)


def all_families():
    return [
        LinearRegressionFamily(),
        LogisticRegressionFamily(),
        MultinomialLogisticFamily(3),
    ]


@pytest.fixture(params=all_families(), ids=lambda fam: fam.name)
def family(request):
    return request.param


def random_instance(family, rng, d=None):
    """A random (x, y, theta) triple with moderate logits."""
    d = d or int(rng.integers(1, 5))
    x = rng.standard_normal(d) / np.sqrt(d)
    theta = rng.standard_normal(family.param_dim(d)) / np.sqrt(d)
    y = family.sample_label(x, theta, rng)
    return x, y, theta
