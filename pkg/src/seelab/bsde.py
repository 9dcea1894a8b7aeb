"""Regression Monte Carlo for the recursive-utility BSDE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidArgumentError
from .forward import simulate_forward
from .regression import RegressionBasis

__all__ = [
    "BSDESolution",
    "CostEstimate",
    "backward_induction",
    "solve_bsde",
    "backward_semigroup",
    "cost_functional",
]

DEFAULT_BASIS = RegressionBasis(degree=2, ridge=1e-8)


@dataclass
class BSDESolution:
    """Discrete solution ``(Y, Z)`` on an ensemble.

    ``se`` is the Monte Carlo standard error of ``Y(t0)``, taken as the
    standard error of the path-wise cost samples ``terminal + sum dt k``.
    ``residual`` is the absolute mean gap between ``Y[:, 0]`` and the
    re-substituted values ``terminal + sum dt k - sum Z dW``.
    """

    Y: np.ndarray
    Z: np.ndarray
    picard_iters: int
    residual: float
    se: float

    @property
    def y0(self):
        return float(np.mean(self.Y[:, 0]))


def backward_induction(states, dW, dts, terminal, driver, basis=None,
                       picard_max=8, tol=1e-10):
    """Backward Euler scheme implicit in ``Y`` and explicit in ``Z``.

    ``states[:, i]`` are the regression features' inputs at step ``i`` and
    ``driver(i, y, z)`` returns the generator on all paths.  At each step::

        E_i = E[Y_{i+1} | states_i]
        Z_i = E[(Y_{i+1} - E_i) dW_i / dt | states_i]
        Y_i = E_i + dt * driver(i, Y_i, Z_i)      (Picard sweeps)
    """
    basis = basis or DEFAULT_BASIS
    N, M, m = dW.shape
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (N,) or not np.all(np.isfinite(terminal)):
        raise InvalidArgumentError("terminal values must be a finite vector of length N")
    Y = np.empty((N, M + 1))
    Z = np.empty((N, M, m))
    Y[:, M] = terminal
    drift_sum = np.zeros(N)
    mart_sum = np.zeros(N)
    used = 0
    for i in range(M - 1, -1, -1):
        x, dt = states[:, i], dts[i]
        proj = basis.projector(x)
        cond = proj.project(Y[:, i + 1])
        Z[:, i] = proj.project((Y[:, i + 1] - cond)[:, None] * dW[:, i] / dt)
        y = cond
        history = []
        for it in range(1, picard_max + 1):
            y_new = cond + dt * driver(i, y, Z[:, i])
            change = float(np.max(np.abs(y_new - y)))
            history.append(change)
            y = y_new
            if change <= tol:
                break
        else:
            if history[-1] > tol:
                raise ConvergenceError(
                    f"Picard sweep did not converge at step {i} (last change {history[-1]:.3e})",
                    history)
        used = max(used, it)
        Y[:, i] = y
        drift_sum += dt * driver(i, y, Z[:, i])
        mart_sum += np.sum(Z[:, i] * dW[:, i], axis=1)
    resub = terminal + drift_sum - mart_sum - Y[:, 0]
    sample = terminal + drift_sum
    se = float(np.std(sample) / np.sqrt(N)) if N > 1 else float("inf")
    return BSDESolution(Y, Z, used, float(abs(np.mean(resub))), se)


def solve_bsde(problem, ensemble, terminal, basis=None, picard_max=8, tol=1e-10):
    """Solve the recursive-utility BSDE with generator ``problem.k``.

    Conditional expectations are regressions on the state at each step.
    """
    X, U, t = ensemble.X, ensemble.U_applied, ensemble.grid.knots

    def driver(i, y, z):
        return problem.k(t[i], X[:, i], y, z, U[:, i])

    return backward_induction(X, ensemble.dW, ensemble.grid.dts, terminal, driver,
                              basis, picard_max, tol)


def backward_semigroup(problem, ensemble, eta, basis=None, t_index=0, end_index=None,
                       return_se=False):
    """``G_{t, t+δ}[eta]``: the BSDE value at ``t`` with terminal ``eta`` at ``t+δ``.

    ``t`` and ``t+δ`` are the knots ``t_index`` and ``end_index`` of the
    ensemble's grid.  For an empty interval the mean of ``eta`` is returned.
    """
    M = ensemble.grid.M
    end_index = M if end_index is None else end_index
    eta = np.asarray(eta, dtype=float)
    if end_index <= t_index:
        value, se = float(np.mean(eta)), float(np.std(eta) / np.sqrt(eta.size))
        return (value, se) if return_se else value
    X = ensemble.X[:, t_index:end_index + 1]
    U = ensemble.U_applied[:, t_index:end_index]
    t = ensemble.grid.knots[t_index:end_index + 1]

    def driver(i, y, z):
        return problem.k(t[i], X[:, i], y, z, U[:, i])

    sol = backward_induction(X, ensemble.dW[:, t_index:end_index], np.diff(t), eta, driver, basis)
    value = sol.y0
    return (value, sol.se) if return_se else value


@dataclass
class CostEstimate:
    value: float
    se: float
    ensemble: object
    solution: BSDESolution

    def __float__(self):
        return self.value


def cost_functional(space, fam, problem, x0, policy, grid, N, seed, basis=None,
                    scheme="semi-implicit", workers=1, dW=None):
    """Recursive cost ``J = Y(t0)`` of ``policy`` started from ``x0`` at ``grid.t0``."""
    ens = simulate_forward(space, fam, problem, policy, x0, grid, N, seed,
                           scheme=scheme, dW=dW, workers=workers)
    sol = solve_bsde(problem, ens, problem.h(ens.X[:, -1]), basis)
    return CostEstimate(sol.y0, sol.se, ens, sol)
