"""Forward SEE simulation, propagators and the a priori / remainder checks."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DivergenceError, InvalidArgumentError, NumericalFailureError
from .problem import apply_noise_operator, bmv
from .rng import brownian_increments, chunk_bounds

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "Propagator",
    "RemainderDiagnostics",
    "ReplayPolicy",
    "simulate_forward",
    "simulate_linear",
    "simulate_propagator",
    "check_apriori_moment",
    "check_continuity_estimate",
    "variational_expansion",
    "loglog_slope",
]

SCHEMES = ("semi-implicit", "explicit")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    M: int
    knots: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.M < 1:
            raise InvalidArgumentError("a time grid needs M >= 1 steps")
        if not (0 <= self.t0 < self.T):
            raise InvalidArgumentError("need 0 <= t0 < T")
        knots = self.knots
        if knots is None:
            knots = np.linspace(self.t0, self.T, self.M + 1)
        knots = np.asarray(knots, dtype=float)
        if knots.shape != (self.M + 1,) or np.any(np.diff(knots) <= 0):
            raise InvalidArgumentError("knots must be M+1 strictly increasing times")
        if not (np.isclose(knots[0], self.t0) and np.isclose(knots[-1], self.T)):
            raise InvalidArgumentError("knots must start at t0 and end at T")
        knots = knots.copy()
        knots[0], knots[-1] = self.t0, self.T
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, t0, T, M):
        return cls(float(t0), float(T), int(M))

    @property
    def dts(self):
        return np.diff(self.knots)

    def index(self, t):
        """Index of the knot equal (to rounding) to ``t``."""
        i = int(np.argmin(np.abs(self.knots - t)))
        if not np.isclose(self.knots[i], t, rtol=0, atol=1e-9 * max(1.0, self.T)):
            raise InvalidArgumentError(f"time {t} is not a grid knot")
        return i

    def sub(self, i0, i1=None):
        """Grid made of knots ``i0 .. i1`` (inclusive)."""
        i1 = self.M if i1 is None else i1
        if not 0 <= i0 < i1 <= self.M:
            raise InvalidArgumentError("sub-grid needs 0 <= i0 < i1 <= M")
        k = self.knots[i0:i1 + 1]
        return TimeGrid(float(k[0]), float(k[-1]), i1 - i0, k)


@dataclass
class PathEnsemble:
    grid: TimeGrid
    N: int
    dW: np.ndarray
    X: np.ndarray
    U_applied: np.ndarray
    seed: int
    scheme: str
    x0: np.ndarray

    @property
    def n(self):
        return self.X.shape[2]

    @property
    def m(self):
        return self.dW.shape[2]


class ReplayPolicy:
    """Re-applies recorded controls ``U[path, step]`` on ``grid`` (open loop)."""

    def __init__(self, grid, U):
        self.knots = grid.knots
        self.U = U

    @classmethod
    def of(cls, ensemble):
        return cls(ensemble.grid, ensemble.U_applied)

    def __call__(self, t, x, paths):
        i = int(np.argmin(np.abs(self.knots - t)))
        return self.U[paths, min(i, self.U.shape[1] - 1)]


def _implicit_inverses(fam, grid, scheme):
    if scheme == "explicit":
        return None
    n = fam.evaluate(grid.knots[0])[0].shape[0]
    inv = np.empty((grid.M, n, n))
    for i, dt in enumerate(grid.dts):
        mat = np.eye(n) - dt * fam.evaluate(grid.knots[i + 1])[0]
        if np.linalg.cond(mat) > 1e14:
            raise NumericalFailureError(f"implicit step matrix is singular at step {i}")
        inv[i] = np.linalg.inv(mat)
    return inv


def _check_finite(X, i):
    bad = ~np.all(np.isfinite(X), axis=1)
    if np.any(bad):
        p = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"state is not finite on path {p} at step {i}", path=p, step=i)


def simulate_forward(space, fam, problem, policy, x0, grid, N, seed,
                     scheme="semi-implicit", dW=None, workers=1):
    """Simulate the controlled SEE on ``grid`` for ``N`` paths.

    Semi-implicit step::

        X_{i+1} = (I - dt A(t_{i+1}))^{-1} [X_i + dt a_i + (B(t_i) X_i + b_i) dW_i]

    The explicit scheme uses ``X_i + dt (A(t_i) X_i + a_i) + ...`` instead.
    ``x0`` is an ``n``-vector or an ``(N, n)`` array.  Pass ``dW`` to couple
    with an existing ensemble; otherwise increments come from ``seed``.
    """
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"scheme must be one of {SCHEMES}")
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    n, m = space.n, space.m
    if dW is None:
        dW = brownian_increments(seed, N, grid.dts, m, workers)
    elif dW.shape != (N, grid.M, m):
        raise InvalidArgumentError(f"dW has shape {dW.shape}, expected {(N, grid.M, m)}")
    x0 = np.asarray(x0, dtype=float)
    X = np.empty((N, grid.M + 1, n))
    X[:, 0] = np.broadcast_to(x0, (N, n))
    u_probe = policy(grid.knots[0], X[:1, 0], np.arange(1))
    du = np.asarray(u_probe).shape[-1]
    U = np.empty((N, grid.M, du))
    inv = _implicit_inverses(fam, grid, scheme)
    ops = [fam.evaluate(t) for t in grid.knots[:-1]]

    def run(start, stop):
        paths = np.arange(start, stop)
        for i in range(grid.M):
            t, dt = grid.knots[i], grid.dts[i]
            x = X[start:stop, i]
            u = np.asarray(policy(t, x, paths), dtype=float).reshape(stop - start, du)
            U[start:stop, i] = u
            A, B = ops[i]
            diff = apply_noise_operator(B, x) + problem.b(t, x, u)
            step = x + dt * problem.a(t, x, u) + np.sum(diff * dW[start:stop, i, None, :], axis=-1)
            if inv is None:
                step = step + dt * bmv(A, x)
            else:
                step = bmv(inv[i], step)
            X[start:stop, i + 1] = step

    bounds = chunk_bounds(N, workers)
    if len(bounds) == 1:
        run(0, N)
    else:
        with ThreadPoolExecutor(len(bounds)) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    for i in range(grid.M + 1):
        _check_finite(X[:, i], i)
    return PathEnsemble(grid, N, dW, X, U, int(seed), scheme, x0.copy())


def simulate_linear(space, fam, x0, grid, N, seed, gamma1=None, gamma2=None,
                    scheme="semi-implicit", dW=None, workers=1):
    """``dz = (A z + gamma1) dt + (B z + gamma2) dW`` with state-free forcing.

    ``gamma1(t)`` returns an ``n``-vector and ``gamma2(t)`` an ``(n, m)``
    matrix; ``None`` means zero.
    """
    from .problem import ConstantPolicy, ControlProblem

    n, m = space.n, space.m

    def a(t, x, u):
        return np.zeros_like(x) if gamma1 is None else np.broadcast_to(gamma1(t), x.shape)

    def b(t, x, u):
        if gamma2 is None:
            return np.zeros((x.shape[0], n, m))
        return np.broadcast_to(gamma2(t), (x.shape[0], n, m))

    zero = lambda *args: np.zeros(args[1].shape[0])
    prob = ControlProblem(n, m, 1, a, b, zero, lambda x: np.zeros(x.shape[0]), name="linear")
    return simulate_forward(space, fam, prob, ConstantPolicy(0.0), x0, grid, N, seed,
                            scheme=scheme, dW=dW, workers=workers)


@dataclass
class Propagator:
    """One-step factors ``E[p, i]`` with ``Phi(t_i, t_j) = E_{j-1} ... E_i``."""

    grid: TimeGrid
    factors: np.ndarray
    flavor: str = "plain"
    beta_path: np.ndarray | None = None

    def phi(self, i, j):
        """``Phi(t_i, t_j)`` per path, shape ``(N, n, n)``; later steps act on the left."""
        N, _, n, _ = self.factors.shape
        if not 0 <= i <= j <= self.grid.M:
            raise InvalidArgumentError("need 0 <= i <= j <= M")
        out = np.broadcast_to(np.eye(n), (N, n, n)).copy()
        for s in range(i, j):
            out = np.einsum("pab,pbc->pac", self.factors[:, s], out)
        return out

    def flow(self, x0, workers=1):
        return kernels.forward_flow(self.factors, x0, workers=workers)


def simulate_propagator(space, fam, grid, dW, a_x=None, b_x=None, beta=None,
                        scheme="semi-implicit", workers=1):
    """Factors of the (optionally tilted) homogeneous propagator.

    With ``Abar = A + a_x`` and ``Bbar_j = B_j + b_x[..., j, :]`` evaluated on
    the reference paths (``a_x`` of shape ``(N, M, n, n)``, ``b_x`` of shape
    ``(N, M, n, m, n)``) and a tilt ``beta`` of shape ``(N, M, m)``::

        Atilde = Abar + sum_j beta_j/2 Bbar_j - |beta|^2/8 I
        Btilde_j = Bbar_j + beta_j/2 I

    Semi-implicit factors are ``(I - dt Atilde)^{-1} (I + sum_j Btilde_j dW_j)``
    where the deterministic ``A`` is taken at ``t_{i+1}`` and the path
    dependent parts at ``t_i`` (so every factor stays adapted).
    """
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"scheme must be one of {SCHEMES}")
    N, M, m = dW.shape
    n = space.n
    if M != grid.M or m != space.m:
        raise InvalidArgumentError("dW does not match the grid / noise dimension")
    for arr, shape in ((a_x, (N, M, n, n)), (b_x, (N, M, n, m, n)), (beta, (N, M, m))):
        if arr is not None and arr.shape != shape:
            raise InvalidArgumentError(f"coefficient has shape {arr.shape}, expected {shape}")
    eye = np.eye(n)
    Bdet = np.stack([fam.evaluate(t)[1] for t in grid.knots[:-1]])      # (M, m, n, n)
    Adet_now = np.stack([fam.evaluate(t)[0] for t in grid.knots[:-1]])  # (M, n, n)
    Adet_next = np.stack([fam.evaluate(t)[0] for t in grid.knots[1:]])
    dts = grid.dts

    Bbar = np.broadcast_to(Bdet[None], (N, M, m, n, n))
    if b_x is not None:
        Bbar = Bbar + b_x.transpose(0, 1, 3, 2, 4)
    path_drift = np.zeros((N, M, n, n)) if (a_x is not None or beta is not None) else None
    if a_x is not None:
        path_drift += a_x
    Btil = Bbar
    if beta is not None:
        path_drift += 0.5 * np.einsum("pij,pijab->piab", beta, Bbar)
        path_drift -= (np.sum(beta**2, axis=-1) / 8.0)[:, :, None, None] * eye
        Btil = Bbar + 0.5 * beta[..., None, None] * eye
    noise = eye + np.einsum("pijab,pij->piab", Btil, dW)

    if scheme == "explicit":
        drift = Adet_now[None] if path_drift is None else Adet_now[None] + path_drift
        E = noise + dts[None, :, None, None] * drift
    elif path_drift is None:
        inv = np.linalg.inv(eye - dts[:, None, None] * Adet_next)[None]
        E = kernels.batched_matmul(inv, noise, workers=workers)
    else:
        mat = eye - dts[None, :, None, None] * (Adet_next[None] + path_drift)
        E = np.linalg.solve(mat, noise)
    flavor = "plain" if beta is None else "tilted"
    return Propagator(grid, np.ascontiguousarray(E), flavor, beta)


def loglog_slope(x, y, floor=1e-300):
    """Least-squares slope of ``log y`` against ``log x``.

    Returns ``inf`` when every ``y`` is below ``floor`` (identically zero
    quantities vanish faster than any power).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = y > floor
    if not np.any(ok):
        return float("inf")
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def check_apriori_moment(space, ensembles, alpha=1.0, tol=0.2):
    """Homogeneity of the a priori moment bounds under input scaling.

    ``ensembles`` maps a scale factor ``c`` to an ensemble simulated with
    inputs (initial value and/or forcing) multiplied by ``c``.  For linear
    dynamics both ``E[sup |z|_H^{2α}]`` and ``E[(∫|z|_V^2)^α]`` scale like
    ``c^{2α}``.
    """
    if len(ensembles) < 3:
        raise InvalidArgumentError("need at least 3 input scales")
    if alpha < 1:
        raise InvalidArgumentError("alpha must be >= 1")
    scales = np.array(sorted(ensembles), dtype=float)
    sup_mom, int_mom = [], []
    for c in scales:
        ens = ensembles[c]
        h2 = np.sum(ens.X**2, axis=2)
        v2 = np.sum(space.v_weights * ens.X**2, axis=2)
        sup_mom.append(float(np.mean(np.max(h2, axis=1) ** alpha)))
        integral = np.sum(v2[:, :-1] * ens.grid.dts, axis=1)
        int_mom.append(float(np.mean(integral**alpha)))
    sup_mom, int_mom = np.array(sup_mom), np.array(int_mom)
    all_zero = not np.any(sup_mom) and not np.any(int_mom)
    s1 = loglog_slope(scales, sup_mom)
    s2 = loglog_slope(scales, int_mom)
    target = 2 * alpha
    passed = all_zero or (abs(s1 - target) <= tol and abs(s2 - target) <= tol)
    ratio = sup_mom / scales ** target
    return {
        "scales": scales.tolist(),
        "sup_moment": sup_mom.tolist(),
        "integral_moment": int_mom.tolist(),
        "sup_slope": s1,
        "integral_slope": s2,
        "target_slope": target,
        "ratio": ratio.tolist(),
        "all_zero": all_zero,
        "pass": bool(passed),
    }


def check_continuity_estimate(space, fam, problem, z0, rho_list, alpha=1.0, t=0.0,
                              T=1.0, N=4000, seed=0, M=512, policy=None,
                              scheme="semi-implicit", tol=0.25):
    """Moment of ``sup_{t<=s<=t+rho} |z(s) - z0|_H^{2α}`` against ``rho``.

    One ensemble on ``[t, t + max(rho)]`` with ``M`` steps serves every
    ``rho`` (prefix suprema); each ``rho`` is rounded to the nearest knot.
    The bound ``C (1 + |z0|_V^{2α}) rho^α`` holds with a stable ``C`` iff the
    fitted slope is at least ``α - tol``.
    """
    from .problem import ConstantPolicy

    rho = np.asarray(rho_list, dtype=float)
    if np.any(rho < 0) or np.any(rho > T - t + 1e-12):
        raise InvalidArgumentError("every rho must lie in [0, T - t]")
    z0 = np.asarray(z0, dtype=float)
    rho_max = float(rho.max())
    estimates = np.zeros(rho.size)
    if rho_max > 0:
        grid = TimeGrid.uniform(t, t + rho_max, M)
        pol = policy or ConstantPolicy(np.zeros(problem.du))
        ens = simulate_forward(space, fam, problem, pol, z0, grid, N, seed, scheme=scheme)
        dev = np.sum((ens.X - z0) ** 2, axis=2) ** alpha
        run_sup = np.maximum.accumulate(dev, axis=1)
        for r_i, r in enumerate(rho):
            if r > 0:
                k = int(round(r / rho_max * M))
                estimates[r_i] = float(np.mean(run_sup[:, k]))
    norm_v = float(space.norm_v(z0))
    scale = 1.0 + norm_v ** (2 * alpha)
    pos = rho > 0
    slope = loglog_slope(rho[pos], estimates[pos]) if pos.sum() >= 2 else float("nan")
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(pos, estimates / (scale * rho**alpha), 0.0)
    return {
        "rho": rho.tolist(),
        "estimate": estimates.tolist(),
        "C": C.tolist(),
        "slope": slope,
        "alpha": alpha,
        "pass": bool(np.isnan(slope) or slope >= alpha - tol),
    }


@dataclass
class RemainderDiagnostics:
    h: np.ndarray
    moments: dict
    slopes: dict
    alpha: float
    threshold: float
    passed: bool


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_MU = 0.5 * (_GL_NODES + 1.0)
_MU_W = 0.5 * _GL_WEIGHTS


def remainder_terms(problem, t, xbar, xhat, u):
    """Remainders ``eps1 .. eps4`` at one time for all paths.

    The ``dμ`` integrals are evaluated by 8-point Gauss-Legendre quadrature.
    """
    N, n = xbar.shape
    ax0 = problem.a_x(t, xbar, u)
    bx0 = problem.b_x(t, xbar, u)
    axx0 = problem.a_xx(t, xbar, u)
    bxx0 = problem.b_xx(t, xbar, u)
    e1 = np.zeros((N, n))
    e2 = np.zeros_like(problem.b(t, xbar, u))
    e3 = np.zeros((N, n))
    e4 = np.zeros_like(e2)
    for mu, w in zip(_MU, _MU_W):
        xm = xbar + mu * xhat
        e1 += w * np.einsum("pik,pk->pi", problem.a_x(t, xm, u) - ax0, xhat)
        e2 += w * np.einsum("pijk,pk->pij", problem.b_x(t, xm, u) - bx0, xhat)
        e3 += w * (1 - mu) * np.einsum("pikl,pk,pl->pi", problem.a_xx(t, xm, u) - axx0, xhat, xhat)
        e4 += w * (1 - mu) * np.einsum("pijkl,pk,pl->pij", problem.b_xx(t, xm, u) - bxx0, xhat, xhat)
    return e1, e2, e3, e4


def variational_expansion(space, fam, problem, base, direction, h_list, alpha=2.0,
                          t_index=0, tol=0.3, workers=1):
    """Orders of the remainder terms of the first/second variational equations.

    For each ``h`` the state restarted at ``Xbar(t) + h * direction`` is
    simulated with the base ensemble's increments and recorded controls.
    ``E[∫ |eps_k|^α]`` is reported per ``h`` together with the fitted
    log-log slope; all four slopes must reach ``2α - tol``.
    """
    problem.require("a_x", "b_x", "a_xx", "b_xx")
    h = np.asarray(h_list, dtype=float)
    if np.any(h <= 0):
        raise InvalidArgumentError("perturbation sizes must be > 0")
    if np.any(np.diff(h) >= 0):
        raise InvalidArgumentError("perturbation sizes must be strictly decreasing")
    direction = np.asarray(direction, dtype=float)
    grid = base.grid.sub(t_index)
    dW = base.dW[:, t_index:]
    xbar = base.X[:, t_index:]
    U = base.U_applied[:, t_index:]
    replay = ReplayPolicy(grid, U)
    moments = {k: np.zeros(h.size) for k in ("eps1", "eps2", "eps3", "eps4")}
    for h_i, hh in enumerate(h):
        if not np.any(direction):
            continue
        pert = simulate_forward(space, fam, problem, replay, xbar[:, 0] + hh * direction,
                                grid, base.N, base.seed, scheme=base.scheme, dW=dW,
                                workers=workers)
        xhat = pert.X - xbar
        acc = np.zeros(4)
        for i in range(grid.M):
            t = grid.knots[i]
            eps = remainder_terms(problem, t, xbar[:, i], xhat[:, i], U[:, i])
            for j, e in enumerate(eps):
                norms = np.sqrt(np.sum(e.reshape(base.N, -1) ** 2, axis=1))
                acc[j] += grid.dts[i] * np.mean(norms**alpha)
        for j, key in enumerate(moments):
            moments[key][h_i] = acc[j]
    slopes = {k: loglog_slope(h, v) for k, v in moments.items()}
    threshold = 2 * alpha - tol
    passed = all(s >= threshold for s in slopes.values() if not np.isnan(s))
    return RemainderDiagnostics(h, moments, slopes, alpha, threshold, bool(passed))

