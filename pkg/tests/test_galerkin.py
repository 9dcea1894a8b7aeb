import numpy as np
import pytest

from seelab.errors import InvalidArgumentError
from seelab.galerkin import (
    GalerkinSpace,
    OperatorFamily,
    check_coercivity,
    check_quasi_skew,
    make_laplacian_space,
)


def test_single_mode_laplacian():
    space, fam = make_laplacian_space(1, 1, 1.0)
    assert space.v_weights[0] == pytest.approx(1 + np.pi**2)
    assert space.v_weights[0] == pytest.approx(10.8696, abs=1e-4)
    assert fam.evaluate(0.3)[0] == pytest.approx(np.array([[-np.pi**2]]))
    assert not fam.evaluate(0.0)[1].any()


def test_q_decay_zero_is_identity_covariance():
    space, _ = make_laplacian_space(3, 4, 2.0, q_decay=0.0)
    assert np.array_equal(space.q_sqrt, np.ones(4))
    space, _ = make_laplacian_space(3, 4, 2.0, q_decay=1.0)
    assert space.q_sqrt == pytest.approx([1, 1 / 2, 1 / 3, 1 / 4])


@pytest.mark.parametrize("n, m, L", [(0, 1, 1.0), (1, 0, 1.0), (1, 1, 0.0), (2, 1, -1.0)])
def test_laplacian_rejects_bad_sizes(n, m, L):
    with pytest.raises(InvalidArgumentError):
        make_laplacian_space(n, m, L)


def test_coercivity_slack_on_basis_vector():
    space, fam = make_laplacian_space(2, 1, 1.0)
    u = np.array([1.0, 0.0])
    A = fam.evaluate(0.0)[0]
    lhs = 2 * u @ A @ u
    rhs = -fam.delta * space.norm_v(u) ** 2 + fam.k_bound * space.norm_h(u) ** 2
    assert lhs == pytest.approx(-2 * np.pi**2)
    assert rhs == pytest.approx(-(1 + np.pi**2))
    assert rhs - lhs >= 0


def test_heat_family_passes():
    space, fam = make_laplacian_space(6, 2, 1.0)
    assert fam.delta == 1.0 and fam.k_bound == 0.0
    rep = check_coercivity(fam, space, [0.0, 0.5, 1.0], n_samples=10000, seed=3)
    assert rep.passed
    assert check_quasi_skew(fam, space, [0.0], n_samples=500).passed


def test_zero_operator_fails_coercivity():
    space = GalerkinSpace(3, 1, np.array([1.0, 2.0, 5.0]), np.ones(1))
    fam = OperatorFamily.constant(np.zeros((3, 3)), np.zeros((1, 3, 3)), 1.0, 0.0)
    rep = check_coercivity(fam, space, [0.0], n_samples=100)
    assert not rep.passed
    assert rep.worst_coercivity_slack < 0


def test_tiny_delta_with_k_one_passes():
    space = GalerkinSpace(3, 1, np.array([1.0, 2.0, 5.0]), np.ones(1))
    fam = OperatorFamily.constant(np.zeros((3, 3)), np.zeros((1, 3, 3)), 1e-12, 1.0)
    assert check_coercivity(fam, space, [0.0], n_samples=200).passed


def test_quasi_skew_cases():
    space = GalerkinSpace(3, 1, np.full(3, 2.0), np.ones(1))
    skew = np.array([[0, 1, 0], [-1, 0, 2], [0, -2, 0]], dtype=float)
    fam = OperatorFamily.constant(-np.eye(3), skew[None], 1.0, 0.0)
    assert check_quasi_skew(fam, space, [0.0], n_samples=300).passed
    fam = OperatorFamily.constant(-np.eye(3), np.eye(3)[None], 1.0, 0.5)
    rep = check_quasi_skew(fam, space, [0.0], n_samples=300)
    assert not rep.passed
    assert rep.worst_skew_slack == pytest.approx(-0.5)


def test_empty_grid_and_bad_constants():
    space, fam = make_laplacian_space(2, 1)
    with pytest.raises(InvalidArgumentError):
        check_coercivity(fam, space, [])
    with pytest.raises(InvalidArgumentError):
        check_coercivity(fam, space, [0.0], n_samples=0)
    with pytest.raises(InvalidArgumentError):
        OperatorFamily.constant(np.eye(2), np.zeros((1, 2, 2)), 0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        OperatorFamily.constant(np.eye(2), np.zeros((1, 2, 2)), 1.0, -1.0)
    with pytest.raises(InvalidArgumentError):
        GalerkinSpace(2, 1, np.array([0.5, 2.0]), np.ones(1))


def test_non_finite_operator_rejected():
    fam = OperatorFamily(lambda t: np.array([[np.nan]]), lambda t: np.zeros((1, 1, 1)), 1.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        fam.evaluate(0.0)


def test_report_dict_has_pass_key():
    space, fam = make_laplacian_space(2, 1)
    d = check_coercivity(fam, space, [0.0], n_samples=10).as_dict()
    assert d["pass"] is True and d["n_samples"] == 10
