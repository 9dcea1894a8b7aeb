import numpy as np
import pytest

from conftest import linear_problem, scalar_setup
from seelab.adjoint import solve_adjoints
from seelab.bsde import solve_bsde
from seelab.dpp import (AnalyticValue, ControlLattice, ModelSetup, check_dpp,
                        check_value_along_optimal, convexity_probe, estimate_value, hjb_residual,
                        lipschitz_probe, semiconcavity_probe, superdiff_inclusion_check,
                        time_continuity_slope, time_diff_check)
from seelab.errors import InvalidArgumentError
from seelab.experiments import make_linear_example
from seelab.forward import simulate_forward


def _quadratic(sign=1.0, H=None, g=None):
    """``sign·‖x‖²`` by default, else ``½ xᵀHx + <g, x>``."""
    if H is None:
        return AnalyticValue(lambda t, X: sign * np.sum(X**2, axis=1))
    return AnalyticValue(lambda t, X: 0.5 * np.einsum("pi,ij,pj->p", X, H, X) + X @ g)


@pytest.fixture(scope="module")
def example2():
    spec = make_linear_example(N=1000, M=32)
    su = spec.setup
    ens = simulate_forward(su.space, su.fam, su.problem, spec.policy, spec.x0, su.full_grid(),
                           spec.N, spec.seed, scheme=su.scheme)
    bsde = solve_bsde(su.problem, ens, su.problem.h(ens.X[:, -1]))
    return spec, ens, bsde, solve_adjoints(su.space, su.fam, su.problem, ens, bsde)


def test_terminal_value_is_h(example2):
    spec = example2[0]
    x = np.array([0.3, -1.2])
    est = estimate_value(spec.setup, spec.setup.T, x, spec.lattice, 100, 0)
    assert est.value == pytest.approx(x @ np.array([1.0, 0.5])) and est.se == 0.0


def test_control_blind_policies_agree_exactly():
    space, fam = scalar_setup(-1.0)
    prob = linear_problem(b=0.3, h=lambda x: np.cos(x[:, 0]))
    setup = ModelSetup(space, fam, prob, M=16)
    est = estimate_value(setup, 0.0, [0.5], ControlLattice([[0.0], [1.0], [-2.0]]), 300, 3)
    assert np.all(est.costs == est.costs[0])


def test_larger_lattice_never_costs_more(example2):
    spec = example2[0]
    full = estimate_value(spec.setup, 0.0, spec.x0, spec.lattice, 500, 1)
    sub = estimate_value(spec.setup, 0.0, spec.x0, ControlLattice(spec.lattice.U_pts[1:], 2),
                         500, 1)
    assert full.value <= sub.value


def test_lattice_family_cap():
    lat = ControlLattice(np.eye(3), S=6, family_cap=20, seed=2)
    assert len(lat) == 20 and len(set(lat.assignments)) == 20
    assert all((k,) * 6 in lat.assignments for k in range(3))
    with pytest.raises(InvalidArgumentError):
        ControlLattice(np.zeros((0, 1)))


def test_dpp_zero_step_and_half_horizon(example2):
    spec = example2[0]
    zero = check_dpp(spec.setup, 0.0, spec.x0, 0.0, spec.lattice, 500, 0)
    assert zero["gap"] == 0.0 and zero["pass"]
    half = check_dpp(spec.setup, 0.0, spec.x0, 0.5, spec.lattice, 500, 0, surrogate=spec.oracle.V)
    assert half["pass"], half
    with pytest.raises(InvalidArgumentError):
        check_dpp(spec.setup, 0.5, spec.x0, 0.75, spec.lattice, 100, 0)


def test_value_along_optimal_with_exact_value(example2):
    spec, ens, bsde, _ = example2
    rep = check_value_along_optimal(spec.setup, ens, bsde, spec.oracle.V, [0.25, 0.5, 1.0])
    assert rep["pass"] and len(rep["rows"]) == 3
    with pytest.raises(InvalidArgumentError):
        check_value_along_optimal(spec.setup, ens, bsde, spec.oracle.V, [2.0])


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_semiconcavity_constant_of_squared_norm(sign, rng):
    V = _quadratic(sign)
    pairs = rng.standard_normal((6, 2, 3))
    C, se = semiconcavity_probe(V, 0.0, pairs, [0.0, 0.25, 0.5, 0.75, 1.0])
    # V = ±‖x‖² gives C = ±1 exactly
    assert C == pytest.approx(sign) and se == 0.0


def test_convexity_counterexample(rng):
    pairs = rng.standard_normal((6, 2, 2))
    bump, _ = convexity_probe(_quadratic(-1.0), 0.0, pairs, [0.25, 0.5, 0.75])
    bowl, _ = convexity_probe(_quadratic(1.0), 0.0, pairs, [0.25, 0.5, 0.75])
    assert bump > 0 and bowl < 0


class TestSuperdiff:
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([0.3, -0.1])
    xbar = np.array([[0.4, -0.7]])
    dirs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.0, 0.0]])

    def _run(self, p, P):
        V = _quadratic(H=self.H, g=self.g)
        return superdiff_inclusion_check(V, 0.0, self.xbar, p, P[None], self.dirs,
                                         [0.1, 0.05, 0.025])

    def test_exact_jets(self):
        p = self.xbar @ self.H + self.g
        assert self._run(p, self.H)["pass"]
        assert self._run(p, self.H + np.eye(2))["pass"]    # larger P stays a superjet

    def test_wrong_jets(self):
        p = self.xbar @ self.H + self.g
        assert not self._run(p, self.H - np.eye(2))["pass"]
        assert self._run(p + 0.5, self.H)["fraction_violating"] > 0


def test_time_diff_skips_past_times(example2):
    spec, ens, bsde, adj = example2
    i = ens.grid.M // 2
    t = ens.grid.knots[i]
    rep = time_diff_check(spec.oracle.V, spec.setup, ens, bsde, adj, i, [t, t - 0.1, t + 0.25])
    assert len(rep["rows"]) == 1 and len(rep["notes"]) == 2
    assert len(rep["rate"]) == 8


def test_hjb_detects_wrong_candidate(example2, rng):
    spec = example2[0]
    X = rng.standard_normal((20, 2))
    pts = spec.lattice.U_pts
    good = hjb_residual(spec.oracle.V, spec.setup, 0.3, X, pts)
    assert np.max(np.abs(good)) <= 1e-12
    a = np.array([1.0, 0.5])
    wrong = AnalyticValue(lambda t, X: 2 * X @ a, lambda t, X: np.broadcast_to(2 * a, X.shape),
                          lambda t, X: np.zeros((X.shape[0], 2, 2)))
    assert np.max(np.abs(hjb_residual(wrong, spec.setup, 0.3, X, pts))) > 1e-2
    assert np.allclose(hjb_residual(wrong, spec.setup, 1.0, X, pts), X @ a)


def test_lipschitz_and_time_slope():
    a = np.array([3.0, -4.0])
    V = AnalyticValue(lambda t, X: X @ a + t**2)
    dirs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]])
    assert np.allclose(lipschitz_probe(V, 0.0, np.zeros(2), dirs, [0.1, 1.0]), 5.0)
    slope, diffs = time_continuity_slope(V, 0.5, np.zeros(2), [0.01, 0.02, 0.04])
    assert slope == pytest.approx(1.0, abs=0.05)
