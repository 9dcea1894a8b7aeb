import numpy as np
import pytest

from conftest import linear_problem, scalar_setup
from seelab.bsde import backward_induction, backward_semigroup, cost_functional, solve_bsde
from seelab.errors import ConvergenceError, InvalidArgumentError
from seelab.forward import TimeGrid, simulate_forward
from seelab.galerkin import GalerkinSpace, OperatorFamily
from seelab.problem import ConstantPolicy


def _driftless(n=2, m=1, b=(0.3, 0.4), N=4000, M=32, seed=0, x0=(0.5, -0.2), k=None):
    space = GalerkinSpace(n, m, np.ones(n), np.ones(m))
    fam = OperatorFamily.constant(np.zeros((n, n)), np.zeros((m, n, n)), 1.0, 1.0)
    b = np.asarray(b, dtype=float).reshape(n, m)
    prob = linear_problem(n, m, b=b, k=k)
    ens = simulate_forward(space, fam, prob, ConstantPolicy(0.0), np.asarray(x0),
                           TimeGrid.uniform(0, 1, M), N, seed)
    return space, fam, prob, ens, b


def test_martingale_terminal():
    a = np.array([1.0, 0.5])
    _, _, prob, ens, b = _driftless(N=20000, M=64)
    sol = solve_bsde(prob, ens, ens.X[:, -1] @ a)
    assert abs(sol.y0 - a @ ens.x0) <= 3 * sol.se
    z_target = a @ b
    z_se = np.std(sol.Z[:, :, 0]) / np.sqrt(sol.Z[:, :, 0].size)
    assert abs(sol.Z[:, :, 0].mean() - z_target[0]) <= 3 * max(z_se, 1e-3)


def test_exponential_generator():
    space, fam = scalar_setup(-1.0)
    prob = linear_problem(k=lambda t, x, y, z, u: 1.0 * y)
    ens = simulate_forward(space, fam, prob, ConstantPolicy(0.0), [0.0],
                           TimeGrid.uniform(0, 1, 256), 200, 0)
    sol = solve_bsde(prob, ens, np.ones(200))
    assert abs(sol.y0 - np.e) <= 2e-2
    assert sol.picard_iters >= 2


def test_zero_solution():
    _, _, prob, ens, _ = _driftless(N=100)
    sol = solve_bsde(prob, ens, np.zeros(100))
    assert not sol.Y.any() and not sol.Z.any()


def test_comparison():
    _, _, prob, ens, _ = _driftless(N=2000)
    xi = np.sin(ens.X[:, -1, 0])
    lo = solve_bsde(prob, ens, xi)
    hi = solve_bsde(prob, ens, xi + np.abs(ens.X[:, -1, 1]))
    assert hi.y0 >= lo.y0 - 3 * lo.se


def test_flow_property():
    k = lambda t, x, y, z, u: 0.1 * np.sin(x[:, 0]) - 0.2 * y + 0.1 * z[:, 0]  # noqa: E731
    _, _, prob, ens, _ = _driftless(N=3000, k=k)
    full = solve_bsde(prob, ens, np.cos(ens.X[:, -1, 0]))
    mid = ens.grid.M // 2
    split = backward_semigroup(prob, ens, full.Y[:, mid], t_index=0, end_index=mid)
    assert abs(split - full.y0) <= 3 * full.se + 1e-12


def test_semigroup_conventions():
    _, _, prob, ens, _ = _driftless(N=500)
    eta = ens.X[:, 5, 0] ** 2
    assert backward_semigroup(prob, ens, eta, t_index=5, end_index=5) == pytest.approx(eta.mean())
    value, se = backward_semigroup(prob, ens, ens.X[:, -1, 0], t_index=0, return_se=True)
    assert abs(value - ens.x0[0]) <= 3 * se + 1e-12


def test_constant_terminal_and_unit_generator():
    space, fam = scalar_setup(-1.0)
    grid = TimeGrid.uniform(0.25, 1, 16)
    prob = linear_problem(b=0.3, h=lambda x: np.full(x.shape[0], 2.5))
    J = cost_functional(space, fam, prob, [1.0], ConstantPolicy(0.0), grid, 300, 1)
    assert abs(J.value - 2.5) <= 1e-10
    prob = linear_problem(b=0.3, k=lambda t, x, y, z, u: np.ones(x.shape[0]))
    J = cost_functional(space, fam, prob, [1.0], ConstantPolicy(0.0), grid, 300, 1)
    assert abs(float(J) - 0.75) <= 1e-10


def test_reproducible_across_workers():
    space, fam = scalar_setup(-1.0)
    prob = linear_problem(b=0.3, h=lambda x: np.sin(x[:, 0]))
    grid = TimeGrid.uniform(0, 1, 16)
    one = cost_functional(space, fam, prob, [1.0], ConstantPolicy(0.0), grid, 300, 4)
    many = cost_functional(space, fam, prob, [1.0], ConstantPolicy(0.0), grid, 300, 4, workers=3)
    assert one.value == many.value


def test_errors():
    _, _, prob, ens, _ = _driftless(N=50)
    with pytest.raises(InvalidArgumentError):
        solve_bsde(prob, ens, np.zeros(49))
    with pytest.raises(InvalidArgumentError):
        solve_bsde(prob, ens, np.full(50, np.nan))
    with pytest.raises(ConvergenceError) as info:
        backward_induction(ens.X, ens.dW, ens.grid.dts, np.ones(50),
                           lambda i, y, z: 200.0 * y, picard_max=3)
    assert len(info.value.residuals) == 3
