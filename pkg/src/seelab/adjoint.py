"""First- and second-order adjoint processes along a reference trajectory."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bsde import DEFAULT_BASIS, backward_induction
from .errors import ConvergenceError, InvalidArgumentError
from .forward import simulate_linear, simulate_propagator
from .problem import bmv

__all__ = [
    "AdjointBundle",
    "PathCoefficients",
    "path_coefficients",
    "solve_first_adjoint",
    "build_G",
    "solve_bsie",
    "solve_second_adjoint",
    "solve_adjoints",
    "ItoCheckResult",
    "verify_ito_formula",
]


def _sym(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


@dataclass
class PathCoefficients:
    """Derivatives of the coefficients along the reference 4-tuple, step ``i < M``."""

    a_x: np.ndarray   # (N, M, n, n)
    b_x: np.ndarray   # (N, M, n, m, n)
    k_x: np.ndarray   # (N, M, n)
    k_y: np.ndarray   # (N, M)
    k_z: np.ndarray   # (N, M, m)


def path_coefficients(problem, ensemble, bsde):
    """Evaluate ``a_x, b_x, k_x, k_y, k_z`` on ``(X̄, Ȳ, Z̄, ū)`` at every step."""
    problem.require("a_x", "b_x", "k_x", "k_y", "k_z")
    N, M, n, m = ensemble.N, ensemble.grid.M, ensemble.n, ensemble.m
    out = PathCoefficients(np.empty((N, M, n, n)), np.empty((N, M, n, m, n)),
                           np.empty((N, M, n)), np.empty((N, M)), np.empty((N, M, m)))
    for i, t in enumerate(ensemble.grid.knots[:-1]):
        x, u = ensemble.X[:, i], ensemble.U_applied[:, i]
        y, z = bsde.Y[:, i], bsde.Z[:, i]
        out.a_x[:, i] = problem.a_x(t, x, u)
        out.b_x[:, i] = problem.b_x(t, x, u)
        out.k_x[:, i] = problem.k_x(t, x, y, z, u)
        out.k_y[:, i] = problem.k_y(t, x, y, z, u)
        out.k_z[:, i] = problem.k_z(t, x, y, z, u)
    return out


def _bbar(fam, t, b_x_i):
    """``B̄_j = B_j + b_x[:, :, j, :]`` stacked as ``(N, m, n, n)``."""
    return fam.evaluate(t)[1][None] + b_x_i.transpose(0, 2, 1, 3)


def solve_first_adjoint(fam, problem, ensemble, bsde, basis=None, coeffs=None):
    """Backward sweep for ``(p, q)``.

    With ``pe = E[p_{i+1} | X̄_i]`` and ``q_i = E[(p_{i+1} - pe) dW_i^T / dt | X̄_i]``::

        rhs = pe + dt [a_x^T pe + (k_y + sum_j k_z^j B̄_j^T) pe
                       + sum_j (B̄_j^T + k_z^j) q_j + k_x]

    The semi-implicit scheme solves ``(I - dt A(t_i)^T) p_i = rhs``; the
    explicit one uses ``p_i = rhs + dt A(t_i)^T pe``.  Returns ``p`` of
    shape ``(N, M+1, n)``, ``q`` of shape ``(N, M, n, m)`` and the pooled
    standard errors ``{"p": ..., "q": ...}`` of the regressions.
    """
    problem.require("h_x")
    basis = basis or DEFAULT_BASIS
    coeffs = coeffs or path_coefficients(problem, ensemble, bsde)
    grid, X, dW = ensemble.grid, ensemble.X, ensemble.dW
    N, M, n, m = ensemble.N, grid.M, ensemble.n, ensemble.m
    p = np.empty((N, M + 1, n))
    q = np.empty((N, M, n, m))
    p[:, M] = problem.h_x(X[:, M])
    se_p = se_q = 0.0
    for i in range(M - 1, -1, -1):
        t, dt = grid.knots[i], grid.dts[i]
        proj = basis.projector(X[:, i])
        pnext = p[:, i + 1]
        pe = proj.project(pnext)
        innov = pnext - pe
        target = innov[:, :, None] * dW[:, i, None, :] / dt
        q[:, i] = proj.project(target)
        se_p = max(se_p, float(np.sqrt(np.mean(innov**2) / N)))
        se_q = max(se_q, float(np.sqrt(np.mean((target - q[:, i])**2) * dt / N)))
        Bbar = _bbar(fam, t, coeffs.b_x[:, i])                    # (N, m, n, n)
        kz = coeffs.k_z[:, i]
        BtP = np.einsum("pjba,pb->pja", Bbar, pe)                 # B̄_j^T pe
        BtQ = np.einsum("pjba,pbj->pa", Bbar, q[:, i])            # sum_j B̄_j^T q_j
        drift = (bmv(np.swapaxes(coeffs.a_x[:, i], 1, 2), pe)
                 + coeffs.k_y[:, i, None] * pe
                 + np.sum(kz[:, :, None] * BtP, axis=1)
                 + BtQ + np.sum(q[:, i] * kz[:, None, :], axis=2)
                 + coeffs.k_x[:, i])
        rhs = pe + dt * drift
        A = fam.evaluate(t)[0]
        if ensemble.scheme == "explicit":
            p[:, i] = rhs + dt * bmv(A.T, pe)
        else:
            p[:, i] = bmv(np.linalg.inv(np.eye(n) - dt * A.T), rhs)
    return p, q, {"p": se_p, "q": se_q}


def build_G(fam, problem, ensemble, bsde, p, q, coeffs=None):
    """Matrix of the bilinear form ``G(t)`` along every path and step.

    ``J`` maps ``x̂`` to the ``(x, y, z)`` slots of the generator Hessian:
    rows ``I``, ``p^T`` and ``(B̄_j^T p + q_j)^T``.  Then::

        G = J^T D²k J + sum_i p_i a_xx[i] + sum_j (k_z^j p + q_j) . b_xx[:, j]
    """
    problem.require("a_xx", "b_xx", "k_hess")
    coeffs = coeffs or path_coefficients(problem, ensemble, bsde)
    grid = ensemble.grid
    N, M, n, m = ensemble.N, grid.M, ensemble.n, ensemble.m
    G = np.empty((N, M, n, n))
    eye = np.broadcast_to(np.eye(n), (N, n, n))
    for i, t in enumerate(grid.knots[:-1]):
        x, u = ensemble.X[:, i], ensemble.U_applied[:, i]
        y, z = bsde.Y[:, i], bsde.Z[:, i]
        pi, qi = p[:, i], q[:, i]
        Bbar = _bbar(fam, t, coeffs.b_x[:, i])
        zrows = np.einsum("pjba,pb->pja", Bbar, pi) + np.swapaxes(qi, 1, 2)   # (N, m, n)
        J = np.concatenate([eye, pi[:, None, :], zrows], axis=1)
        H = problem.k_hess(t, x, y, z, u)
        Gi = np.einsum("pra,prs,psb->pab", J, H, J)
        Gi += np.einsum("pi,piab->pab", pi, problem.a_xx(t, x, u))
        weight = coeffs.k_z[:, i, None, :] * pi[:, :, None] + qi            # (N, n, m)
        Gi += np.einsum("pij,pijab->pab", weight, problem.b_xx(t, x, u))
        G[:, i] = _sym(Gi)
    return G


def solve_bsie(E, terminal, dts, states, source=None, basis=None, picard_max=12, tol=None,
               workers=1):
    """Picard iteration for ``P(t_i) = E[R(t_i) | states_i]``.

    ``R`` is the backward accumulation ``R_M = terminal`` and
    ``R_i = E_i^T R_{i+1} E_i + dt_i source(P)_i``, where ``source(P)``
    maps the current iterate ``(N, M+1, n, n)`` to ``(N, M, n, n)`` (or
    ``None`` when there is no running term).  Starts from ``P = 0``.
    Returns ``(P, iterations, history)`` where ``history`` lists the sup-norm
    changes between iterates.
    """
    basis = basis or DEFAULT_BASIS
    N, M, n, _ = E.shape
    terminal = np.broadcast_to(np.asarray(terminal, dtype=float), (N, n, n))
    if tol is None:
        tol = 1e-8 * (1.0 + float(np.max(np.abs(terminal))))
    P = np.zeros((N, M + 1, n, n))
    history = []
    for it in range(1, picard_max + 1):
        S = None if source is None else source(P)
        R = kernels.backward_congruence(E, S, terminal, dts, workers=workers)
        new = np.empty_like(P)
        new[:, M] = terminal
        for i in range(M):
            new[:, i] = _sym(basis.project(states[:, i], R[:, i]))
        history.append(float(np.max(np.abs(new - P))))
        P = new
        if history[-1] <= tol or (source is None and it >= 1):
            return P, it, history
    raise ConvergenceError(
        f"second-order adjoint Picard iteration did not converge ({history[-1]:.3e} > {tol:.3e})",
        history)


@dataclass
class AdjointBundle:
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    G_path: np.ndarray
    picard_iters: int
    sup_change: float
    history: list = field(default_factory=list)
    se: dict = field(default_factory=dict)
    coeffs: PathCoefficients | None = None

    @property
    def geometric(self):
        """True when Picard changes shrink by a factor ``<= 0.9`` after the second sweep."""
        h = [c for c in self.history[1:] if c > 0]
        return all(b <= 0.9 * a for a, b in zip(h, h[1:]))

    @property
    def pooled_se(self):
        return float(np.sqrt(sum(v**2 for v in self.se.values())))


def solve_second_adjoint(space, fam, problem, ensemble, bsde, G_path, basis=None,
                         picard_max=12, tol=None, coeffs=None, workers=1):
    """``P`` from the tilted propagator with ``β = k_z`` along the reference paths.

    Returns ``(P, iterations, history, se)``; ``se`` is the largest standard
    error over steps of the regressed entries.
    """
    problem.require("h_xx")
    basis = basis or DEFAULT_BASIS
    coeffs = coeffs or path_coefficients(problem, ensemble, bsde)
    prop = simulate_propagator(space, fam, ensemble.grid, ensemble.dW, a_x=coeffs.a_x,
                               b_x=coeffs.b_x, beta=coeffs.k_z, scheme=ensemble.scheme,
                               workers=workers)
    terminal = problem.h_xx(ensemble.X[:, -1])
    k_y = coeffs.k_y[:, :, None, None]

    def source(P):
        return k_y * P[:, :-1] + G_path

    P, iters, history = solve_bsie(prop.factors, terminal, ensemble.grid.dts, ensemble.X,
                                   source, basis, picard_max, tol, workers)
    R = kernels.backward_congruence(prop.factors, source(P), terminal, ensemble.grid.dts,
                                    workers=workers)
    N = ensemble.N
    se = max(float(np.sqrt(np.mean((R[:, i] - P[:, i])**2) / N)) for i in range(ensemble.grid.M))
    return P, iters, history, se


def solve_adjoints(space, fam, problem, ensemble, bsde, basis=None, picard_max=12, tol=None,
                   workers=1):
    """First adjoint, ``G`` and second adjoint in one bundle."""
    coeffs = path_coefficients(problem, ensemble, bsde)
    p, q, se = solve_first_adjoint(fam, problem, ensemble, bsde, basis, coeffs)
    G = build_G(fam, problem, ensemble, bsde, p, q, coeffs)
    P, iters, history, se_P = solve_second_adjoint(space, fam, problem, ensemble, bsde, G, basis,
                                                   picard_max, tol, coeffs, workers)
    se["P"] = se_P
    return AdjointBundle(p, q, P, G, iters, history[-1], history, se, coeffs)


@dataclass
class ItoCheckResult:
    """Outcome of the quadratic Itô identity check.

    ``sigma_path`` is ``σ`` from the decomposition into the ``x`` and
    homogeneous ``x̃`` conditional expectations, ``sigma_direct`` is
    ``Y - <P x, x>`` with ``Y`` the regression solution of the scalar BSDE.
    ``residual_rms`` is the RMS gap between the two divided by ``scale``.
    """

    residual_rms: float
    scale: float
    sigma_path: np.ndarray
    sigma_direct: np.ndarray
    Zcal_path: np.ndarray
    beta_used: np.ndarray
    P: np.ndarray
    x: np.ndarray
    x_tilde: np.ndarray
    Y: np.ndarray


def verify_ito_formula(space, fam, grid, x0, xi, f=None, beta=None, gamma1=None, gamma2=None,
                       N=4000, seed=0, dW=None, basis=None, scheme="semi-implicit",
                       picard_max=12, tol=None, workers=1):
    """Check that ``<P x, x> + σ`` solves the scalar BSDE driven by ``<f(P) x, x> + β Z``.

    ``x`` solves the linear SEE with forcing ``gamma1(t)``, ``gamma2(t)``
    and ``x̃`` the homogeneous one from the same ``x0`` and noise.  ``P``
    solves the operator BSIE with terminal ``xi`` (``(n, n)`` or per path)
    and running term ``f(i, P_i)`` (``None`` means zero) under the
    propagator tilted by ``beta`` (``(N, M, m)``, a constant, or ``None``).

    ``σ`` is rebuilt as in the decomposition ``I1 + I2 + I3``::

        σ = (Y[x] - Y[x̃]) - (<P x, x> - <P x̃, x̃>)

    where ``Y[·]`` are regression solutions of the BSDE fed with ``x`` or
    ``x̃``.  The identity holds iff this agrees with ``Y[x] - <P x, x>``.
    """
    n, m = space.n, space.m
    basis = basis or DEFAULT_BASIS
    if dW is None:
        from .rng import brownian_increments
        dW = brownian_increments(seed, N, grid.dts, m, workers)
    N, M = dW.shape[0], grid.M
    if dW.shape != (N, M, m):
        raise InvalidArgumentError(f"dW has shape {dW.shape}, expected {(N, M, m)}")
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (N, n, n))
    if xi.shape != (N, n, n):
        raise InvalidArgumentError("xi must be (n, n) or (N, n, n)")
    if beta is None:
        beta = 0.0
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (N, M, m)).copy()

    x = simulate_linear(space, fam, x0, grid, N, seed, gamma1, gamma2, scheme, dW, workers).X
    xt = simulate_linear(space, fam, x0, grid, N, seed, None, None, scheme, dW, workers).X
    forced = gamma1 is not None or gamma2 is not None
    # x̃ = x without forcing; duplicated regressors only add variance
    states = np.concatenate([x, xt], axis=2) if forced else x
    prop = simulate_propagator(space, fam, grid, dW, beta=beta, scheme=scheme, workers=workers)

    source = None
    if f is not None:
        def source(P):
            return np.stack([f(i, P[:, i]) for i in range(M)], axis=1)

    P, _, _ = solve_bsie(prop.factors, xi, grid.dts, states, source, basis, picard_max, tol,
                         workers)
    fP = None if f is None else source(P)

    def quad(mats, v):
        return np.einsum("pa,pab,pb->p", v, mats, v)

    def solve(path):
        def driver(i, y, z):
            run = 0.0 if fP is None else quad(fP[:, i], path[:, i])
            return run + np.sum(beta[:, i] * z, axis=1)
        return backward_induction(states, dW, grid.dts, quad(xi, path[:, M]), driver, basis)

    sol_x = solve(x)
    sol_xt = solve(xt) if forced else sol_x
    Px = np.stack([quad(P[:, i], x[:, i]) for i in range(M + 1)], axis=1)
    Pxt = np.stack([quad(P[:, i], xt[:, i]) for i in range(M + 1)], axis=1)
    sigma = (sol_x.Y - sol_xt.Y) - (Px - Pxt)
    direct = sol_x.Y - Px
    scale = float(np.sqrt(np.mean(sol_x.Y**2))) or 1.0
    resid = float(np.sqrt(np.mean((sigma - direct)**2))) / scale
    return ItoCheckResult(resid, scale, sigma, direct, sol_x.Z, beta, P, x, xt, sol_x.Y)
