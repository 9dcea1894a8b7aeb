import numpy as np
import pytest

from seelab.errors import InvalidArgumentError, NumericalFailureError
from seelab.regression import RegressionBasis


def test_feature_count():
    basis = RegressionBasis(2)
    assert basis.n_features(3) == 10
    assert basis.features(np.ones((4, 3))).shape == (4, 10)
    assert RegressionBasis(2, n_feat=1).n_features(3) == 3


def test_quadratic_target_is_reproduced(rng):
    x = rng.standard_normal((500, 2))
    y = 1.0 + x[:, 0] - 2 * x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 1]
    fit = RegressionBasis(2, ridge=0.0).fit(x, y)
    x_new = rng.standard_normal((7, 2))
    y_new = 1.0 + x_new[:, 0] - 2 * x_new[:, 1] ** 2 + 0.5 * x_new[:, 0] * x_new[:, 1]
    assert np.allclose(fit.predict(x_new), y_new, atol=1e-9)


def test_vector_targets_keep_shape(rng):
    x = rng.standard_normal((100, 2))
    y = rng.standard_normal((100, 3, 2))
    proj = RegressionBasis(1).projector(x)
    assert proj.project(y).shape == (100, 3, 2)
    assert RegressionBasis(1).fit(x, y).predict(x[:5]).shape == (5, 3, 2)


def test_deterministic_states_give_sample_mean():
    x = np.ones((50, 2))
    y = np.arange(50.0)
    assert np.allclose(RegressionBasis(2).project(x, y), y.mean())


def test_rank_deficiency_without_ridge(rng):
    x = rng.standard_normal((50, 1))
    x2 = np.hstack([x, 2 * x])
    with pytest.raises(NumericalFailureError, match="ridge"):
        RegressionBasis(1, ridge=0.0).projector(x2)
    RegressionBasis(1, ridge=1e-8).projector(x2)


def test_bad_arguments(rng):
    with pytest.raises(InvalidArgumentError):
        RegressionBasis(-1)
    with pytest.raises(InvalidArgumentError):
        RegressionBasis(2, ridge=-1.0)
    with pytest.raises(InvalidArgumentError):
        RegressionBasis(1).project(rng.standard_normal((5, 1)), np.zeros(4))
