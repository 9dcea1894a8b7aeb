import numpy as np
import pytest

from conftest import linear_problem
from seelab.adjoint import solve_adjoints
from seelab.bsde import solve_bsde
from seelab.dpp import estimate_value
from seelab.errors import InvalidArgumentError
from seelab.experiments import make_linear_example, make_suboptimal_example
from seelab.forward import simulate_forward
from seelab.mp import example2_sufficiency_check, hamiltonian, mp_residual


def _pipeline(spec):
    su = spec.setup
    ens = simulate_forward(su.space, su.fam, su.problem, spec.policy, spec.x0, su.full_grid(),
                           spec.N, spec.seed, scheme=su.scheme)
    bsde = solve_bsde(su.problem, ens, su.problem.h(ens.X[:, -1]))
    return ens, bsde, solve_adjoints(su.space, su.fam, su.problem, ens, bsde)


@pytest.fixture(scope="module")
def example2():
    spec = make_linear_example(N=1000, M=64)
    return (spec,) + _pipeline(spec)


def test_hamiltonian_at_reference_has_no_shift(rng):
    prob = linear_problem(2, 1, b=np.array([[0.2], [0.1]]),
                          k=lambda t, x, y, z, u: y + z[:, 0] ** 2)
    x = rng.standard_normal((5, 2))
    y, z = rng.standard_normal(5), rng.standard_normal((5, 1))
    p, q = rng.standard_normal((5, 2)), rng.standard_normal((5, 2, 1))
    u = np.zeros((5, 1))
    ref = prob.b(0.0, x, u)
    H = hamiltonian(0.0, x, y, z, u, p, q, prob, ref)
    assert np.allclose(H, np.sum(q * ref, axis=(1, 2)) + y + z[:, 0] ** 2)


def test_hamiltonian_vanishes_for_zero_adjoints(rng):
    prob = linear_problem(1, 1, b=0.4)
    x = rng.standard_normal((4, 1))
    H = hamiltonian(0.0, x, np.zeros(4), np.zeros((4, 1)), np.ones((4, 1)), np.zeros((4, 1)),
                    np.zeros((4, 1, 1)), prob, prob.b(0.0, x, np.zeros((4, 1))))
    assert not H.any()


def test_example2_hamiltonian_gap(example2):
    spec, ens, bsde, bundle = example2
    prob = spec.setup.problem
    i, t = 3, ens.grid.knots[3]
    x, u = ens.X[:, i], ens.U_applied[:, i]
    ref = prob.b(t, x, u)
    alt = np.broadcast_to([0.0, 1.0], u.shape)
    args = (t, x, bsde.Y[:, i], bsde.Z[:, i])
    gap = (hamiltonian(*args, alt, bundle.p[:, i], bundle.q[:, i], prob, ref)
           - hamiltonian(*args, u, bundle.p[:, i], bundle.q[:, i], prob, ref))
    a, delta_b = np.array([1.0, 0.5]), np.array([0.1, 0.6])
    assert np.allclose(gap, (a @ delta_b) ** 2, atol=1e-10)


def test_example2_residual(example2):
    spec, ens, bsde, bundle = example2
    rep = mp_residual(spec.setup.problem, ens, bsde, bundle, spec.lattice.U_pts)
    assert rep.passed and rep.residual_at_optimal == 0.0
    assert rep.min_residual >= -rep.tol and rep.fraction_violating == 0.0
    assert np.all(rep.residual[:, :, 0] == 0.0)          # attained at the base point
    assert np.all(rep.residual[:, :, 1] > 0.0)


def test_reduces_to_example2_expression(example2):
    spec, ens, bsde, bundle = example2
    rep = mp_residual(spec.setup.problem, ens, bsde, bundle, spec.lattice.U_pts)
    a = np.array([1.0, 0.5])
    b = np.array([[0.2, 0.3], [-0.4, 0.2]])
    Z = bsde.Z[:, :, 0]
    for k, v in enumerate(spec.lattice.U_pts):
        shift = a @ b @ (v - spec.lattice.U_pts[0])
        assert np.allclose(rep.residual[:, :, k], (Z + shift) ** 2 - Z**2, atol=1e-12)


def test_singleton_lattice_and_shift_invariance(example2):
    spec, ens, bsde, bundle = example2
    prob = spec.setup.problem
    rep = mp_residual(prob, ens, bsde, bundle, spec.lattice.U_pts[:1])
    assert rep.passed and not rep.residual.any()
    shifted = mp_residual(prob.shifted(3.7), ens, bsde, bundle, spec.lattice.U_pts)
    base = mp_residual(prob, ens, bsde, bundle, spec.lattice.U_pts)
    assert np.allclose(shifted.residual, base.residual, atol=1e-12)


def test_empty_lattice(example2):
    spec, ens, bsde, bundle = example2
    with pytest.raises(InvalidArgumentError):
        mp_residual(spec.setup.problem, ens, bsde, bundle, np.zeros((0, 2)))


def test_suboptimal_candidate_detected():
    spec = make_suboptimal_example()
    ens, bsde, bundle = _pipeline(spec)
    rep = mp_residual(spec.setup.problem, ens, bsde, bundle, spec.lattice.U_pts)
    assert rep.fraction_violating > 0.05 and not rep.passed
    # brute force: u = 0 really is cheaper
    est = estimate_value(spec.setup, 0.0, spec.x0, spec.lattice, 500, 0)
    assert est.costs[0] < est.costs[-1]


def test_sufficiency_check():
    a = np.array([1.0, 0.5])
    b = np.array([[0.2, 0.3], [-0.4, 0.2]])
    square = lambda z: np.sum(z**2, axis=-1)  # noqa: E731
    linear = lambda z: np.sum(z, axis=-1)  # noqa: E731
    z = np.zeros((1, 1))
    assert example2_sufficiency_check(square, a, b, np.eye(2), z)
    assert example2_sufficiency_check(linear, a, b, np.eye(2)[:1], z)
    # <a, b (e2 - e1)> = 0.6 > 0; reverse the base to get a negative shift
    assert not example2_sufficiency_check(linear, a, b, np.eye(2)[::-1], z)
