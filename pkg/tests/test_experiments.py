import numpy as np
import pytest

from seelab.errors import ConfigurationError
from seelab.experiments import (BUILTINS, CHECKS, build_builtin, make_heat_control_problem,
                                make_linear_example, make_lq_oracle, make_quadratic_drift_problem,
                                min_paths, run_experiment, solve_lq_riccati)


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_construct(name):
    spec = build_builtin(name, N=500, M=64)
    assert set(spec.checks) <= set(CHECKS)
    cfg = spec.resolved_config()
    assert cfg["paths"] == 500 and cfg["steps"] == 64 and cfg["name"] == name


def test_unknown_builtin_and_keyword():
    with pytest.raises(ConfigurationError):
        build_builtin("nope")
    with pytest.raises(ConfigurationError, match="lq-oracle"):
        build_builtin("lq-oracle", colour="red")


def test_heat_rejects_strong_noise_operator():
    make_heat_control_problem(beta_strength=0.2, N=10)
    with pytest.raises(ConfigurationError, match="coercivity"):
        make_heat_control_problem(beta_strength=5.0, N=10)


def test_example2_preconditions():
    linear = lambda z: np.sum(z, axis=-1)  # noqa: E731
    # <a, b e2> = 0.4 > 0 keeps e1 optimal
    make_linear_example(f=linear, N=10)
    with pytest.raises(ConfigurationError, match="optimality"):
        make_linear_example(f=linear, U_pts=[[1.0, 0.0], [0.0, -1.0]], N=10)
    with pytest.raises(ConfigurationError, match="vanish"):
        make_linear_example(f=linear, base_index=1, N=10)
    with pytest.raises(ConfigurationError, match="unstable"):
        make_linear_example(n=4, M=32, N=10)
    with pytest.raises(ConfigurationError, match="shapes"):
        make_linear_example(a_vec=[1.0, 2.0, 3.0], N=10)


def test_zero_weight_gives_zero_value():
    spec = make_linear_example(a_vec=[0.0, 0.0], N=500, M=32, checks=("bsde-oracle", "mp"))
    rep = run_experiment(spec)
    assert rep.passed
    assert rep.checks["bsde-oracle"].summary["Y0"] == 0.0


def test_finite_difference_derivatives():
    spec = make_linear_example(f=lambda z: np.sum(z**4, axis=-1), N=10)
    z = np.array([[0.5]])
    k_z = spec.setup.problem.k_z(0.0, np.zeros((1, 2)), np.zeros(1), z, np.zeros((1, 2)))
    assert k_z[0, 0] == pytest.approx(4 * 0.5**3, rel=1e-5)


def test_empty_checks_give_empty_report():
    spec = make_lq_oracle(N=10, checks=())
    rep = run_experiment(spec)
    assert rep.checks == {} and rep.passed


def test_unknown_check_and_missing_oracle():
    with pytest.raises(ConfigurationError):
        make_lq_oracle(checks=("bogus",))
    with pytest.raises(ConfigurationError, match="closed-form"):
        make_heat_control_problem(checks=("hjb",))


def test_run_is_deterministic_and_reports_oracle():
    spec = make_lq_oracle(N=1000, M=32, checks=("bsde-oracle", "adjoint"))
    a, b = run_experiment(spec).as_dict(), run_experiment(spec).as_dict()
    a.pop("timestamp"), b.pop("timestamp")
    assert a == b
    summary = a["checks"]["bsde-oracle"]["summary"]
    assert {"Y0", "oracle_value", "error"} <= set(summary)


def test_check_failure_is_contained():
    spec = make_lq_oracle(N=min_paths(make_lq_oracle(N=10)), M=16, checks=("bsde-oracle",))
    spec.setup.problem.h = lambda x: np.full(x.shape[0], np.nan)
    rep = run_experiment(spec)
    assert not rep.passed and rep.checks["bsde-oracle"].error


def test_riccati_against_closed_forms():
    # Q = 0 makes S a Bernoulli equation; Π is linear for any Q
    lam, rho, R, G, Q, T = -0.7, 0.3, 2.0, 1.5, 0.8, 1.0
    c = rho - 2 * lam
    t = np.linspace(0, T, 7)
    dense, _ = solve_lq_riccati(lam, 0.4, 0.0, R, rho, G, T)
    w = (1 / G + 1 / (c * R)) * np.exp(c * (T - t)) - 1 / (c * R)
    assert np.allclose(dense(t)[0], 1 / w, rtol=1e-9)
    dense, _ = solve_lq_riccati(lam, 0.4, Q, R, rho, G, T)
    Pi = (G - Q / c) * np.exp(-c * (T - t)) + Q / c
    assert np.allclose(dense(t)[2], Pi, rtol=1e-9)


def test_lq_requires_stable_drift():
    with pytest.raises(ConfigurationError):
        make_lq_oracle(lam=0.5)


def test_quadratic_drift_derivatives(rng):
    _, _, prob = make_quadratic_drift_problem(n=3, c=0.5, cubic=0.2)
    x, u = rng.standard_normal((4, 3)), np.zeros((4, 1))
    eps = 1e-6
    fd = np.stack([(prob.a(0, x + eps * e, u) - prob.a(0, x - eps * e, u)) / (2 * eps)
                   for e in np.eye(3)], axis=-1)
    assert np.allclose(prob.a_x(0, x, u), fd, atol=1e-6)
