"""Value-function estimates over control lattices and the checks built on them."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bsde import DEFAULT_BASIS, backward_semigroup, cost_functional
from .errors import InvalidArgumentError, SeelabError
from .forward import TimeGrid, loglog_slope, simulate_forward
from .problem import PiecewiseConstantPolicy, apply_noise_operator, bmv
from .regression import RegressionBasis
from .rng import derive_seed

__all__ = [
    "ModelSetup",
    "ControlLattice",
    "ValueEstimate",
    "estimate_value",
    "AnalyticValue",
    "FittedValue",
    "LatticeValue",
    "check_dpp",
    "check_value_along_optimal",
    "superdiff_inclusion_check",
    "time_diff_check",
    "semiconcavity_probe",
    "convexity_probe",
    "hjb_residual",
    "smooth_relation_check",
    "lipschitz_probe",
    "NUMERICAL_FLOOR",
]

# Absolute slack added to every "<= 3 SE" comparison so that exactly
# reproduced quantities (SE = 0) are judged by round-off, not by zero.
NUMERICAL_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelSetup:
    """Everything needed to simulate from an arbitrary ``(t, x)``.

    Sub-horizon grids keep the step ``dt = (T - t0) / M`` of the full grid.
    """

    space: object
    fam: object
    problem: object
    T: float = 1.0
    M: int = 128
    t0: float = 0.0
    scheme: str = "semi-implicit"
    basis: RegressionBasis = DEFAULT_BASIS
    workers: int = 1

    @property
    def dt(self):
        return (self.T - self.t0) / self.M

    def grid(self, t, t_end=None):
        t_end = self.T if t_end is None else t_end
        if not self.t0 - 1e-12 <= t <= t_end <= self.T + 1e-12:
            raise InvalidArgumentError(f"need {self.t0} <= t <= t_end <= {self.T}")
        steps = max(1, int(round((t_end - t) / self.dt)))
        return TimeGrid.uniform(t, t_end, steps)

    def full_grid(self):
        return TimeGrid.uniform(self.t0, self.T, self.M)


class ControlLattice:
    """Piecewise-constant policies taking values in ``U_pts`` on ``S`` equal intervals.

    The family holds every assignment of points to intervals.  When that
    exceeds ``family_cap``, the constant policies are kept and the rest is
    filled by a seeded random subsample.
    """

    def __init__(self, U_pts, S=1, family_cap=256, seed=0):
        U_pts = np.atleast_2d(np.asarray(U_pts, dtype=float))
        if U_pts.shape[0] < 1 or S < 1:
            raise InvalidArgumentError("control lattice needs at least one point and one interval")
        if family_cap < 1:
            raise InvalidArgumentError("family_cap must be >= 1")
        self.U_pts, self.S, self.family_cap = U_pts, int(S), int(family_cap)
        K = U_pts.shape[0]
        if K ** S <= family_cap:
            self.assignments = [tuple(a) for a in itertools.product(range(K), repeat=S)]
        else:
            chosen = [(k,) * S for k in range(min(K, family_cap))]
            seen = set(chosen)
            rng = np.random.default_rng(derive_seed(seed, "lattice"))
            while len(chosen) < family_cap:
                a = tuple(int(v) for v in rng.integers(K, size=S))
                if a not in seen:
                    seen.add(a)
                    chosen.append(a)
            self.assignments = chosen

    def __len__(self):
        return len(self.assignments)

    def policies(self, t0, t1):
        return [PiecewiseConstantPolicy(self.U_pts[list(a)], t0, t1) for a in self.assignments]

    def __repr__(self):
        return f"ControlLattice(|U|={self.U_pts.shape[0]}, S={self.S}, size={len(self)})"


@dataclass
class ValueEstimate:
    """``V(t, x)`` as the smallest lattice cost under common random numbers."""

    t: float
    x: np.ndarray
    value: float
    se: float
    argmin: int
    costs: np.ndarray
    ses: np.ndarray
    failed: list = field(default_factory=list)
    best: object = None
    method: str = "lattice-inf"


def estimate_value(setup, t, x, lattice, N, seed, t_end=None, terminal=None):
    """``min`` over the lattice of the recursive cost from ``(t, x)``.

    All policies share one Brownian sample.  ``terminal`` optionally replaces
    ``h`` by a function of the state at ``t_end`` (used by the DPP check).
    Policies whose simulation fails are skipped with a warning.
    """
    x = np.asarray(x, dtype=float)
    t_end = setup.T if t_end is None else t_end
    if t_end - t <= 1e-12:
        fn = terminal or setup.problem.h
        v = float(fn(x[None])[0])
        return ValueEstimate(t, x, v, 0.0, -1, np.array([v]), np.zeros(1))
    grid = setup.grid(t, t_end)
    costs, ses, failed = [], [], []
    best = None
    for idx, policy in enumerate(lattice.policies(t, t_end)):
        try:
            if terminal is None:
                est = cost_functional(setup.space, setup.fam, setup.problem, x, policy, grid, N,
                                      seed, setup.basis, setup.scheme, setup.workers)
                val, se = est.value, est.se
            else:
                ens = simulate_forward(setup.space, setup.fam, setup.problem, policy, x, grid,
                                       N, seed, scheme=setup.scheme, workers=setup.workers)
                val, se = backward_semigroup(setup.problem, ens, terminal(ens.X[:, -1]),
                                             setup.basis, return_se=True)
                est = ens
        except SeelabError as exc:
            warnings.warn(f"policy {idx} skipped: {exc}", RuntimeWarning, stacklevel=2)
            failed.append(idx)
            val, se = np.inf, np.inf
            est = None
        costs.append(val)
        ses.append(se)
        if best is None or val < costs[best[0]]:
            best = (idx, est)
    costs, ses = np.array(costs), np.array(ses)
    if len(failed) == len(costs):
        raise SeelabError("every lattice policy failed")
    k = int(np.argmin(costs))
    return ValueEstimate(t, x, float(costs[k]), float(ses[k]), k, costs, ses, failed,
                         best[1] if best else None)


# ----------------------------------------------------------------------------
# value surrogates: callables V(t, X) on state arrays (K, n)


class AnalyticValue:
    """Closed-form candidate with optional derivatives (``se`` is zero)."""

    def __init__(self, fn, grad=None, hess=None, time_deriv=None, name="analytic"):
        self.fn, self.grad_fn, self.hess_fn, self.dt_fn = fn, grad, hess, time_deriv
        self.name = name
        self.se = 0.0

    def __call__(self, t, X):
        return np.asarray(self.fn(t, np.atleast_2d(X)), dtype=float)

    def grad(self, t, X):
        return np.asarray(self.grad_fn(t, np.atleast_2d(X)), dtype=float)

    def hess(self, t, X):
        return np.asarray(self.hess_fn(t, np.atleast_2d(X)), dtype=float)

    def time_derivative(self, t, X):
        if self.dt_fn is None:
            return np.zeros(np.atleast_2d(X).shape[0])
        return np.asarray(self.dt_fn(t, np.atleast_2d(X)), dtype=float)


class LatticeValue:
    """Evaluates ``estimate_value`` point by point (exact but expensive)."""

    def __init__(self, setup, lattice, N, seed):
        self.setup, self.lattice, self.N, self.seed = setup, lattice, N, seed
        self.se = 0.0
        self._cache = {}

    def estimate(self, t, x):
        key = (round(float(t), 12), tuple(np.round(np.asarray(x, dtype=float), 14)))
        if key not in self._cache:
            self._cache[key] = estimate_value(self.setup, t, x, self.lattice, self.N, self.seed)
        return self._cache[key]

    def __call__(self, t, X):
        out = []
        for x in np.atleast_2d(X):
            est = self.estimate(t, x)
            self.se = max(self.se, est.se)
            out.append(est.value)
        return np.array(out)


class FittedValue:
    """Degree-2 regression of lattice values at sample points, fitted per time.

    ``points`` is a ``(P, n)`` array or a callable ``t -> (P, n)``.  The
    reported ``se`` is the largest point standard error plus the RMS fit
    residual.  At ``t = T`` the terminal cost ``h`` is returned exactly.
    """

    def __init__(self, setup, lattice, N, seed, points, degree=2):
        self.setup, self.lattice, self.N, self.seed = setup, lattice, N, seed
        self.points = points
        self.basis = RegressionBasis(degree=degree, ridge=1e-10)
        self.se = 0.0
        self._fits = {}

    def fit(self, t):
        key = round(float(t), 12)
        if key not in self._fits:
            pts = self.points(t) if callable(self.points) else self.points
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            ests = [estimate_value(self.setup, t, x, self.lattice, self.N, self.seed) for x in pts]
            vals = np.array([e.value for e in ests])
            fit = self.basis.fit(pts, vals)
            resid = float(np.sqrt(np.mean((fit.predict(pts) - vals)**2)))
            se = max(e.se for e in ests) + resid
            self._fits[key] = (fit, se)
            self.se = max(self.se, se)
        return self._fits[key]

    def __call__(self, t, X):
        X = np.atleast_2d(X)
        if abs(t - self.setup.T) <= 1e-12:
            return self.setup.problem.h(X)
        return self.fit(t)[0].predict(X)

    def grad(self, t, X, eps=1e-3):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[1]
        out = np.empty_like(X)
        for k in range(n):
            e = np.zeros(n)
            e[k] = eps
            out[:, k] = (self(t, X + e) - self(t, X - e)) / (2 * eps)
        return out


# ----------------------------------------------------------------------------
# checks


def _total_se(*values):
    return float(np.sqrt(sum(v * v for v in values)))


def check_dpp(setup, t, x, delta, lattice, N, seed, surrogate=None, se_scale=3.0):
    """Compare ``V(t, x)`` with ``min_u G_{t, t+δ}[V(t+δ, X(t+δ))]``.

    ``surrogate`` provides ``V(t+δ, ·)`` as a function of state; the default
    is a :class:`FittedValue` on points spread around ``x``.  Returns a dict
    with the two sides, the gap and its standard error.
    """
    if not 0 <= delta <= setup.T - t + 1e-12:
        raise InvalidArgumentError(f"delta must lie in [0, {setup.T - t}]")
    lhs = estimate_value(setup, t, x, lattice, N, seed)
    if delta <= 1e-12:
        rhs_value, rhs_se, fit_se = lhs.value, lhs.se, 0.0
    else:
        t_mid = t + delta
        if t_mid >= setup.T - 1e-12:
            terminal, fit_se = setup.problem.h, 0.0
        else:
            if surrogate is None:
                surrogate = FittedValue(setup, lattice, N, seed, _probe_cloud(x, seed))
            terminal = lambda X: surrogate(t_mid, X)  # noqa: E731
            terminal(np.atleast_2d(x))  # force the fit so its se is known
            fit_se = surrogate.se
        rhs = estimate_value(setup, t, x, lattice, N, seed, t_end=t_mid, terminal=terminal)
        rhs_value, rhs_se = rhs.value, rhs.se
    gap = abs(lhs.value - rhs_value)
    se = _total_se(lhs.se, rhs_se, fit_se)
    return {
        "t": t, "delta": delta, "lhs": lhs.value, "rhs": rhs_value, "gap": gap, "se": se,
        "pass": bool(gap <= se_scale * se + 2.0 * setup.dt + NUMERICAL_FLOOR),
    }


def _probe_cloud(x, seed, count=None, radius=1.0):
    x = np.asarray(x, dtype=float)
    n = x.size
    count = count or 2 * ((n + 1) * (n + 2) // 2) + 1
    rng = np.random.default_rng(derive_seed(seed, "probe-cloud"))
    scale = radius * (1.0 + np.linalg.norm(x))
    return x + scale * rng.uniform(-1, 1, size=(count, n))


def check_value_along_optimal(setup, ensemble, bsde, surrogate, delta_list, t_index=0,
                              allowance=0.0, se_scale=3.0):
    """RMS over paths of ``V(t+δ, X̄(t+δ)) - Ȳ(t+δ)`` for each ``δ``."""
    grid = ensemble.grid
    rows = []
    for delta in delta_list:
        j = t_index + int(round(delta / grid.dts[0]))
        if j > grid.M:
            raise InvalidArgumentError(f"delta {delta} runs past the horizon")
        t = grid.knots[j]
        v = surrogate(t, ensemble.X[:, j])
        diff = v - bsde.Y[:, j]
        rms = float(np.sqrt(np.mean(diff**2)))
        se = _total_se(surrogate.se, bsde.se)
        floor = NUMERICAL_FLOOR * (1.0 + float(np.sqrt(np.mean(bsde.Y[:, j]**2))))
        rows.append({"delta": float(delta), "t": float(t), "rms": rms, "se": se,
                     "pass": bool(rms <= se_scale * se + allowance + floor)})
    return {"rows": rows, "pass": all(r["pass"] for r in rows)}


def superdiff_inclusion_check(surrogate, t, xbar, p, P, directions, h_list, se_scale=3.0):
    """Second-order super- and subdifferential inequalities on shrinking probes.

    For each cell ``k`` and direction ``d``:
    ``defect(h) = V(xbar + h d) - V(xbar) - h <p, d> - h^2/2 <P d, d>``.
    The superdifferential side passes when the fitted intercept of
    ``defect(h)/h^2`` against ``h`` is at most its error allowance.  The
    subdifferential side estimates ``p̂`` and ``P̂_dd`` by central differences
    at the smallest ``h`` and requires ``<p̂ - p, d> ≈ 0`` and
    ``P̂_dd <= <P d, d>`` within the allowance.
    """
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    P = np.asarray(P, dtype=float).reshape(xbar.shape[0], xbar.shape[1], xbar.shape[1])
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    h = np.asarray(sorted(h_list, reverse=True), dtype=float)
    base = surrogate(t, xbar)
    cells = []
    for k in range(xbar.shape[0]):
        for d in directions:
            if not np.any(d):
                cells.append({"intercept": 0.0, "defects": [0.0] * h.size, "sup_ok": True,
                              "sub_ok": True})
                continue
            up = np.array([surrogate(t, xbar[k] + hh * d)[0] for hh in h])
            dn = np.array([surrogate(t, xbar[k] - hh * d)[0] for hh in h])
            lin = h * (p[k] @ d)
            quad = 0.5 * h**2 * (d @ P[k] @ d)
            defect = up - base[k] - lin - quad
            ratio = defect / h**2
            if h.size > 1:
                slope, intercept = np.polyfit(h, ratio, 1)
            else:
                intercept = ratio[0]
            allow = se_scale * 2.0 * surrogate.se / h[-1]**2 + NUMERICAL_FLOOR * (1 + 1 / h[-1]**2)
            hs = h[-1]
            p_hat = (up[-1] - dn[-1]) / (2 * hs)
            P_hat = (up[-1] - 2 * base[k] + dn[-1]) / hs**2
            grad_allow = se_scale * surrogate.se / hs + NUMERICAL_FLOOR / hs + 1e-6
            sub_ok = bool(abs(p_hat - p[k] @ d) <= grad_allow and P_hat <= d @ P[k] @ d + allow)
            cells.append({"intercept": float(intercept), "defects": defect.tolist(),
                          "sup_ok": bool(intercept <= allow), "sub_ok": sub_ok})
    frac = float(np.mean([not (c["sup_ok"] and c["sub_ok"]) for c in cells])) if cells else 0.0
    return {"cells": cells, "fraction_violating": frac, "pass": frac == 0.0}


def time_diff_rate(setup, ensemble, bsde, adjoint, i):
    """``-<p, A X̄> - <q, B X̄> + H1`` per path at step ``i``.

    ``H1 = -H(ū) + <P (B X̄ + b), B X̄ + b>``.
    """
    from .mp import hamiltonian

    problem = setup.problem
    t = ensemble.grid.knots[i]
    A, B = setup.fam.evaluate(t)
    x, u = ensemble.X[:, i], ensemble.U_applied[:, i]
    p, q, P = adjoint.p[:, i], adjoint.q[:, i], adjoint.P[:, i]
    BX = apply_noise_operator(B, x)
    b = problem.b(t, x, u)
    sig = BX + b
    H = hamiltonian(t, x, bsde.Y[:, i], bsde.Z[:, i], u, p, q, problem, b)
    H1 = -H + np.einsum("pam,pab,pbm->p", sig, P, sig)
    return -np.sum(p * bmv(A, x), axis=1) - np.sum(q * BX, axis=(1, 2)) + H1


def time_diff_check(surrogate, setup, ensemble, bsde, adjoint, t_index, tau_list, cells=None,
                    se_scale=3.0):
    """One-sided time quotient ``[V(τ, X̄_t) - V(t, X̄_t)] / (τ - t)`` against the rate.

    Passes when the quotient is at most the rate plus the error allowance for
    every ``τ`` and every probed path ``cells`` (default: the first 8 paths).
    """
    grid = ensemble.grid
    t = grid.knots[t_index]
    cells = np.arange(min(8, ensemble.N)) if cells is None else np.asarray(cells)
    rate = time_diff_rate(setup, ensemble, bsde, adjoint, t_index)[cells]
    x = ensemble.X[cells, t_index]
    v_t = surrogate(t, x)
    rows, notes = [], []
    for tau in tau_list:
        if tau <= t:
            notes.append(f"tau={tau} <= t skipped")
            continue
        quotient = (surrogate(tau, x) - v_t) / (tau - t)
        allow = se_scale * 2.0 * surrogate.se / (tau - t) + NUMERICAL_FLOOR / (tau - t)
        excess = float(np.max(quotient - rate))
        rows.append({"tau": float(tau), "max_quotient": float(np.max(quotient)),
                     "max_excess": excess, "allowance": allow, "pass": bool(excess <= allow)})
    return {"t": float(t), "rate": rate.tolist(), "rows": rows, "notes": notes,
            "pass": all(r["pass"] for r in rows)}


def _midpoint_terms(surrogate, t, x_pairs, lambda_grid):
    x_pairs = np.asarray(x_pairs, dtype=float)
    lam = np.asarray(lambda_grid, dtype=float)
    x0, x1 = x_pairs[:, 0], x_pairs[:, 1]
    v0, v1 = surrogate(t, x0), surrogate(t, x1)
    gaps = np.sum((x1 - x0)**2, axis=1)
    excess = np.empty((x0.shape[0], lam.size))
    for j, l in enumerate(lam):
        vl = surrogate(t, l * x1 + (1 - l) * x0)
        excess[:, j] = l * v1 + (1 - l) * v0 - vl
    return lam, gaps, excess


def semiconcavity_probe(surrogate, t, x_pairs, lambda_grid):
    """Smallest ``C`` with ``λV(x1) + (1-λ)V(x0) - V(x_λ) <= C λ(1-λ)‖x1-x0‖²``.

    Returns ``(C, se)``; ``se`` propagates the surrogate error through the
    smallest admissible denominator.  Endpoints ``λ ∈ {0, 1}`` carry no
    information and are skipped.
    """
    lam, gaps, excess = _midpoint_terms(surrogate, t, x_pairs, lambda_grid)
    inner = (lam > 0) & (lam < 1)
    if not np.any(inner) or not np.any(gaps > 0):
        return 0.0, 0.0
    denom = (lam[inner] * (1 - lam[inner]))[None, :] * gaps[:, None]
    ok = denom > 0
    ratio = excess[:, inner][ok] / denom[ok]
    se = 2.0 * surrogate.se / float(np.min(denom[ok]))
    return float(np.max(ratio)), se


def convexity_probe(surrogate, t, x_pairs, lambda_grid):
    """Largest ``V(x_λ) - λV(x1) - (1-λ)V(x0)``; returns ``(violation, se)``."""
    _, _, excess = _midpoint_terms(surrogate, t, x_pairs, lambda_grid)
    return float(np.max(-excess)), 2.0 * surrogate.se


def hjb_residual(candidate, setup, t, X, lattice_pts):
    """``V_t + <A^T V_x, x> + min_v G(t, x, v, V, V_x, V_xx)`` at each row of ``X``.

    ``G = 1/2 sum_j <V_xx s_j, s_j> + <V_x, a(v)> + k(t, x, V, <V_x, s>, v)``
    with ``s = B x + b(t, x, v)``.  At ``t = T`` the residual is ``V - h``.
    """
    problem = setup.problem
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = candidate(t, X)
    if abs(t - setup.T) <= 1e-12:
        return V - problem.h(X)
    Vx, Vxx = candidate.grad(t, X), candidate.hess(t, X)
    A, B = setup.fam.evaluate(t)
    lattice_pts = np.atleast_2d(np.asarray(lattice_pts, dtype=float))
    best = np.full(X.shape[0], np.inf)
    for v in lattice_pts:
        vv = np.broadcast_to(v, (X.shape[0], problem.du))
        s = apply_noise_operator(B, X) + problem.b(t, X, vv)
        G = (0.5 * np.einsum("pam,pab,pbm->p", s, Vxx, s)
             + np.sum(Vx * problem.a(t, X, vv), axis=1)
             + problem.k(t, X, V, np.sum(Vx[:, :, None] * s, axis=1), vv))
        best = np.minimum(best, G)
    return candidate.time_derivative(t, X) + np.sum(bmv(A.T, Vx) * X, axis=1) + best


def smooth_relation_check(candidate, setup, ensemble, p, q):
    """RMS residuals of ``p = V_x(X̄)`` (relative) and ``q = V_xx (B X̄ + b(ū))`` (absolute)."""
    grid, problem = ensemble.grid, setup.problem
    p_err, p_norm, q_err, q_norm = 0.0, 0.0, 0.0, 0.0
    for i, t in enumerate(grid.knots[:-1]):
        x, u = ensemble.X[:, i], ensemble.U_applied[:, i]
        Vx = candidate.grad(t, x)
        p_err += np.sum((p[:, i] - Vx)**2)
        p_norm += np.sum(Vx**2)
        _, B = setup.fam.evaluate(t)
        s = apply_noise_operator(B, x) + problem.b(t, x, u)
        target = np.einsum("pab,pbm->pam", candidate.hess(t, x), s)
        q_err += np.sum((q[:, i] - target)**2)
        q_norm += np.sum(target**2)
    cells = ensemble.N * grid.M
    return {
        "p_rel_rms": float(np.sqrt(p_err / max(p_norm, 1e-300))),
        "q_rms": float(np.sqrt(q_err / cells)),
        "q_rel_rms": float(np.sqrt(q_err / q_norm)) if q_norm > 0 else float(np.sqrt(q_err / cells)),
    }


def lipschitz_probe(surrogate, t, x, directions, scales):
    """Fitted ``|V(x + s d) - V(x)| / (s ‖d‖)`` per scale; stable values suggest Lipschitz growth."""
    x = np.asarray(x, dtype=float)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    base = surrogate(t, x[None])[0]
    out = []
    for s in scales:
        pts = x + s * directions
        diffs = np.abs(surrogate(t, pts) - base) / (s * np.linalg.norm(directions, axis=1))
        out.append(float(np.max(diffs)))
    return np.array(out)


def time_continuity_slope(surrogate, t, x, deltas):
    """Log-log slope of ``|V(t+δ, x) - V(t, x)|`` against ``δ``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = surrogate(t, x)
    diffs = [float(np.max(np.abs(surrogate(t + d, x) - v))) for d in deltas]
    return loglog_slope(np.asarray(deltas), np.asarray(diffs)), diffs
