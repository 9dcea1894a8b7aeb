"""Built-in problem instances and the experiment runner that wires the checks together."""
from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .adjoint import solve_adjoints, verify_ito_formula
from .bsde import DEFAULT_BASIS, backward_semigroup, solve_bsde
from .dpp import (
    NUMERICAL_FLOOR,
    AnalyticValue,
    ControlLattice,
    FittedValue,
    ModelSetup,
    check_dpp,
    check_value_along_optimal,
    convexity_probe,
    estimate_value,
    hjb_residual,
    semiconcavity_probe,
    smooth_relation_check,
    superdiff_inclusion_check,
    time_diff_check,
)
from .errors import ConfigurationError, InvalidArgumentError, SeelabError
from .forward import (
    check_apriori_moment,
    check_continuity_estimate,
    simulate_forward,
    simulate_linear,
)
from .galerkin import GalerkinSpace, OperatorFamily, check_coercivity, make_laplacian_space
from .mp import example2_sufficiency_check, mp_residual
from .problem import ConstantPolicy, ControlProblem, FeedbackPolicy
from .rng import derive_seed

__all__ = [
    "CHECKS",
    "ExperimentSpec",
    "ExperimentReport",
    "CheckResult",
    "make_linear_example",
    "make_heat_control_problem",
    "make_lq_oracle",
    "make_suboptimal_example",
    "make_quadratic_drift_problem",
    "solve_lq_riccati",
    "run_experiment",
    "BUILTINS",
    "build_builtin",
]

CHECKS = ("coercivity", "apriori", "bsde-oracle", "adjoint", "ito", "mp", "dpp",
          "inclusions", "semiconcavity", "convexity", "hjb", "smooth-relation")


@dataclass
class Oracle:
    """Closed-form reference values; every field is optional."""

    V: Optional[AnalyticValue] = None
    p: Optional[Callable] = None      # (t, X) -> (N, n)
    q: Optional[Callable] = None      # (t, X) -> (N, n, m)
    P: Optional[Callable] = None      # t -> (n, n)
    rel_tol: float = 0.0              # allowance for discretisation bias, relative


@dataclass
class ExperimentSpec:
    name: str
    description: str
    setup: ModelSetup
    x0: np.ndarray
    lattice: ControlLattice
    policy: object
    N: int
    seed: int
    checks: tuple
    oracle: Optional[Oracle] = None
    params: dict = field(default_factory=dict)
    tol_scale: float = 1.0
    surrogate_paths: int = 2000
    semiconcavity_bound: float = 0.0
    hjb_lattice: Optional[np.ndarray] = None

    def __post_init__(self):
        unknown = [c for c in self.checks if c not in CHECKS]
        if unknown:
            raise ConfigurationError(f"unknown checks: {', '.join(unknown)}")
        if self.N < 1 or self.setup.M < 1:
            raise ConfigurationError("paths and steps must be >= 1")
        needs_oracle = {"hjb", "smooth-relation"} & set(self.checks)
        if needs_oracle and (self.oracle is None or self.oracle.V is None):
            raise ConfigurationError(f"checks {sorted(needs_oracle)} need a closed-form value")
        second = {"adjoint", "mp", "inclusions"} & set(self.checks)
        if second:
            self.setup.problem.require("a_x", "b_x", "a_xx", "b_xx", "k_x", "k_y", "k_z",
                                       "k_hess", "h_x", "h_xx")

    @property
    def se_scale(self):
        return 3.0 * self.tol_scale

    def resolved_config(self):
        cfg = dict(self.params)
        cfg.update(name=self.name, paths=self.N, steps=self.setup.M, seed=self.seed,
                   modes=self.setup.space.n, noise_modes=self.setup.space.m,
                   T=self.setup.T, scheme=self.setup.scheme, checks=list(self.checks),
                   tol_scale=self.tol_scale, x0=np.asarray(self.x0).tolist(),
                   lattice_points=self.lattice.U_pts.tolist(), lattice_intervals=self.lattice.S)
        return cfg


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: dict = field(default_factory=dict)
    series: list = field(default_factory=list)   # rows (t, quantity, estimate, stderr)
    error: Optional[str] = None

    def as_dict(self):
        out = {"pass": self.passed, "summary": _clean(self.summary)}
        if self.error:
            out["error"] = self.error
        return out


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


@dataclass
class ExperimentReport:
    name: str
    config: dict
    checks: dict
    timestamp: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def as_dict(self):
        return {
            "experiment": self.name,
            "seed": self.config.get("seed"),
            "config": _clean(self.config),
            "timestamp": self.timestamp,
            "pass": self.passed,
            "checks": {k: v.as_dict() for k, v in self.checks.items()},
        }


# ----------------------------------------------------------------------------
# built-in problems


def _quadratic_f(z):
    return np.sum(z**2, axis=-1)


def make_linear_example(n=2, a_vec=None, b_matrix=None, f=None, U_pts=None, base_index=0,
                        f_z=None, f_zz=None, m=1, N=20000, M=128, seed=0, T=1.0, x0=None,
                        intervals=2, checks=CHECKS, domain_length=1.0):
    """Linear dynamics with control entering the noise only.

    ``dX = A X dt + b(u) dW``, ``k = f(z) - <A^T a, x>``, ``h = <a, x>``
    with the sine-mode Laplacian ``A``.  ``b_matrix`` has shape ``(n, du)``
    and noise mode ``j`` is ``b_matrix u / (j + 1)``.  The distinguished base
    point ``U_pts[base_index]`` is the candidate optimum; construction fails
    unless ``f(<a, b u_base>) = 0 <= f(<a, b u>)`` on the lattice.  Then
    ``V = <a, x>``, ``p = a``, ``q = 0`` and ``P = 0``.

    The explicit scheme is used because it reproduces ``V = <a, x>`` exactly
    on the grid; ``M`` must keep ``dt * max|λ| < 2``.
    """
    space, fam = make_laplacian_space(n, m, domain_length)
    A = fam.evaluate(0.0)[0]
    if M * 2 <= T * float(np.max(np.abs(np.diag(A)))):
        raise ConfigurationError(
            f"explicit scheme unstable: need steps > {T * np.max(np.abs(np.diag(A))) / 2:.0f}")
    if a_vec is None:
        a_vec = 0.5 ** np.arange(n)
    a_vec = np.asarray(a_vec, dtype=float)
    if b_matrix is None:
        b_matrix = np.zeros((n, 2))
        b_matrix[:2, 0] = (0.2, -0.4)
        b_matrix[:2, 1] = (0.3, 0.2)
    b_matrix = np.asarray(b_matrix, dtype=float)
    du = b_matrix.shape[1]
    if U_pts is None:
        U_pts = np.eye(du)
    U_pts = np.atleast_2d(np.asarray(U_pts, dtype=float))
    if a_vec.shape != (n,) or b_matrix.shape[0] != n or U_pts.shape[1] != du:
        raise ConfigurationError("a_vec, b_matrix and U_pts have inconsistent shapes")
    f = f or _quadratic_f
    if f is _quadratic_f:
        f_z = f_z or (lambda z: 2.0 * z)
        f_zz = f_zz or (lambda z: np.broadcast_to(2.0 * np.eye(z.shape[-1]), z.shape + z.shape[-1:]))
    f_z = f_z or _fd_gradient(f)
    f_zz = f_zz or _fd_hessian(f)
    mode_scale = space.q_sqrt / (1.0 + np.arange(m))           # (m,)
    b_full = b_matrix[:, None, :] * mode_scale[None, :, None]   # (n, m, du)
    base = U_pts[base_index]
    zero_z = np.zeros((1, m))
    base_shift = np.einsum("i,ijk,k->j", a_vec, b_full, base)[None]
    if abs(float(f(base_shift)[0])) > 1e-12:
        raise ConfigurationError("f(<a, b u_base>) must vanish at the base point")
    if abs(float(f(zero_z)[0])) > 1e-12 or not example2_sufficiency_check(
            f, a_vec, b_full, U_pts, np.zeros((1, m)), base=np.zeros(du)):
        raise ConfigurationError("optimality condition f(<a, b u>) >= f(0) = 0 fails on the lattice")
    Ata = A.T @ a_vec

    def a(t, x, u):
        return np.zeros_like(x)

    def b(t, x, u):
        return np.einsum("ijk,pk->pij", b_full, u)

    def k(t, x, y, z, u):
        return f(z) - x @ Ata

    zeros = lambda *shape: (lambda t, x, u: np.zeros((x.shape[0],) + shape))  # noqa: E731
    problem = ControlProblem(
        n, m, du, a, b, k, lambda x: x @ a_vec,
        a_x=zeros(n, n), a_xx=zeros(n, n, n), b_x=zeros(n, m, n), b_xx=zeros(n, m, n, n),
        k_x=lambda t, x, y, z, u: np.broadcast_to(-Ata, x.shape).copy(),
        k_y=lambda t, x, y, z, u: np.zeros(x.shape[0]),
        k_z=lambda t, x, y, z, u: f_z(z),
        k_hess=lambda t, x, y, z, u: _block_hessian(n, m, None, None, f_zz(z)),
        h_x=lambda x: np.broadcast_to(a_vec, x.shape).copy(),
        h_xx=lambda x: np.zeros((x.shape[0], n, n)),
        name="linear-example2",
    )
    V = AnalyticValue(lambda t, X: X @ a_vec,
                      lambda t, X: np.broadcast_to(a_vec, X.shape).copy(),
                      lambda t, X: np.zeros((X.shape[0], n, n)), name="<a, x>")
    oracle = Oracle(V=V, p=lambda t, X: np.broadcast_to(a_vec, X.shape).copy(),
                    q=lambda t, X: np.zeros((X.shape[0], n, m)), P=lambda t: np.zeros((n, n)))
    setup = ModelSetup(space, fam, problem, T=T, M=M, scheme="explicit")
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    params = {"a_vec": a_vec.tolist(), "b_matrix": b_matrix.tolist(), "base_index": base_index,
              "domain_length": domain_length}
    return ExperimentSpec("linear-example2", "linear dynamics, control in the noise, V = <a, x>",
                          setup, x0, ControlLattice(U_pts, intervals), ConstantPolicy(base),
                          N, seed, tuple(checks), oracle, params)


def _fd_gradient(f, eps=1e-6):
    def grad(z):
        out = np.empty_like(z)
        for j in range(z.shape[-1]):
            e = np.zeros(z.shape[-1])
            e[j] = eps
            out[..., j] = (f(z + e) - f(z - e)) / (2 * eps)
        return out
    return grad


def _fd_hessian(f, eps=1e-4):
    def hess(z):
        m = z.shape[-1]
        out = np.empty(z.shape + (m,))
        eye = eps * np.eye(m)
        for i in range(m):
            for j in range(m):
                out[..., i, j] = (f(z + eye[i] + eye[j]) - f(z + eye[i] - eye[j])
                                  - f(z - eye[i] + eye[j]) + f(z - eye[i] - eye[j])) / (4 * eps**2)
        return out
    return hess


def _block_hessian(n, m, xx=None, yy=None, zz=None, xz=None):
    """Assemble ``D²k`` in the stacked ``(x, y, z)`` ordering from blocks."""
    blocks = [b for b in (xx, yy, zz, xz) if b is not None]
    N = blocks[0].shape[0]
    H = np.zeros((N, n + 1 + m, n + 1 + m))
    if xx is not None:
        H[:, :n, :n] = xx
    if yy is not None:
        H[:, n, n] = yy
    if zz is not None:
        H[:, n + 1:, n + 1:] = zz
    if xz is not None:
        H[:, :n, n + 1:] = xz
        H[:, n + 1:, :n] = np.swapaxes(xz, 1, 2)
    return H


def _skew(n):
    S = np.zeros((n, n))
    for i in range(n - 1):
        S[i, i + 1], S[i + 1, i] = 1.0, -1.0
    return S


def make_heat_control_problem(n=4, m=2, L=1.0, beta_strength=0.0, control_points=3, N=4000,
                              M=128, seed=0, T=1.0, x0=None, kappa=0.5, intervals=1,
                              checks=("coercivity", "apriori", "bsde-oracle", "mp", "dpp")):
    """Controlled stochastic heat equation in ``n`` sine modes.

    ``B_j`` is ``beta_strength`` times a skew matrix; the coefficients are

    * ``a = 0.5 tanh(x) + g u`` with ``g_i = 0.3 / (i + 1)``,
    * ``b_ij = s_ij (1 + 0.2 sin x_i)`` with ``s_ij = 0.3 q_j / (1 + i + j)``,
    * ``k = 0.5 sum x²/(1+x²) - 0.1 y + 0.1 sum sqrt(1+z²) + kappa u²``,
    * ``h = 0.5 sum log cosh x``,

    and the control lattice is ``control_points`` values in ``[-1, 1]``.
    The candidate policy is ``u = 0``.
    """
    space, fam0 = make_laplacian_space(n, m, L)
    A = fam0.evaluate(0.0)[0]
    B = beta_strength * np.stack([_skew(n) * space.q_sqrt[j] for j in range(m)])
    fam = OperatorFamily.constant(A, B, fam0.delta, fam0.k_bound, fam0.a_bound)
    report = check_coercivity(fam, space, [0.0], n_samples=2000, seed=seed)
    if not report.passed:
        slack = min(("coercivity", report.worst_coercivity_slack),
                    ("dual norm", report.worst_dualnorm_slack),
                    ("quasi-skew", report.worst_skew_slack), key=lambda kv: kv[1])
        raise ConfigurationError(
            f"beta_strength={beta_strength} violates the {slack[0]} condition (slack {slack[1]:.3g})")
    g = 0.3 / (1.0 + np.arange(n))
    s = 0.3 * space.q_sqrt[None, :] / (1.0 + np.arange(n)[:, None] + np.arange(m)[None, :])

    def a(t, x, u):
        return 0.5 * np.tanh(x) + u[:, :1] * g

    def a_x(t, x, u):
        return np.einsum("pi,ij->pij", 0.5 / np.cosh(x)**2, np.eye(n))

    def a_xx(t, x, u):
        out = np.zeros((x.shape[0], n, n, n))
        idx = np.arange(n)
        out[:, idx, idx, idx] = -np.tanh(x) / np.cosh(x)**2
        return out

    def b(t, x, u):
        return s[None] * (1.0 + 0.2 * np.sin(x))[:, :, None]

    def b_x(t, x, u):
        out = np.zeros((x.shape[0], n, m, n))
        idx = np.arange(n)
        out[:, idx, :, idx] = (s[None] * 0.2 * np.cos(x)[:, :, None]).transpose(1, 0, 2)
        return out

    def b_xx(t, x, u):
        out = np.zeros((x.shape[0], n, m, n, n))
        idx = np.arange(n)
        out[:, idx, :, idx, idx] = (s[None] * -0.2 * np.sin(x)[:, :, None]).transpose(1, 0, 2)
        return out

    def k(t, x, y, z, u):
        return (0.5 * np.sum(x**2 / (1 + x**2), axis=1) - 0.1 * y
                + 0.1 * np.sum(np.sqrt(1 + z**2), axis=1) + kappa * np.sum(u**2, axis=1))

    def k_hess(t, x, y, z, u):
        xx = np.einsum("pi,ij->pij", (1 - 3 * x**2) / (1 + x**2)**3, np.eye(n))
        zz = np.einsum("pi,ij->pij", 0.1 / (1 + z**2)**1.5, np.eye(m))
        return _block_hessian(n, m, xx=xx, zz=zz)

    problem = ControlProblem(
        n, m, 1, a, b, k, lambda x: 0.5 * np.sum(np.log(np.cosh(x)), axis=1),
        a_x=a_x, a_xx=a_xx, b_x=b_x, b_xx=b_xx,
        k_x=lambda t, x, y, z, u: x / (1 + x**2)**2,
        k_y=lambda t, x, y, z, u: np.full(x.shape[0], -0.1),
        k_z=lambda t, x, y, z, u: 0.1 * z / np.sqrt(1 + z**2),
        k_hess=k_hess,
        h_x=lambda x: 0.5 * np.tanh(x),
        h_xx=lambda x: np.einsum("pi,ij->pij", 0.5 / np.cosh(x)**2, np.eye(n)),
        name="heat-example1",
    )
    if x0 is None:
        x0 = 0.5 / (1.0 + np.arange(n))
    setup = ModelSetup(space, fam, problem, T=T, M=M, scheme="semi-implicit")
    U = np.linspace(-1.0, 1.0, control_points)[:, None] if control_points > 1 else np.zeros((1, 1))
    params = {"domain_length": L, "beta_strength": beta_strength, "control_points": control_points,
              "kappa": kappa}
    return ExperimentSpec("heat-example1", "controlled stochastic heat equation (sine modes)",
                          setup, np.asarray(x0, dtype=float), ControlLattice(U, intervals),
                          ConstantPolicy(np.zeros(1)), N, seed, tuple(checks), None, params,
                          semiconcavity_bound=10.0)


def solve_lq_riccati(lam, sigma0, Q, R, rho, G, T, rtol=1e-11, atol=1e-13):
    """Dense solutions of the scalar recursive LQ equations on ``[0, T]``.

    ``S' = (ρ - 2λ) S + S²/R - Q``, ``S(T) = G`` (value curvature),
    ``r' = ρ r - σ0² S / 2``, ``r(T) = 0`` (value offset) and
    ``Π' = (ρ - 2λ) Π - Q``, ``Π(T) = G`` (second-order adjoint).
    """
    def rhs(t, y):
        S, r, Pi = y
        return [(rho - 2 * lam) * S + S * S / R - Q, rho * r - 0.5 * sigma0**2 * S,
                (rho - 2 * lam) * Pi - Q]

    sol = solve_ivp(rhs, (T, 0.0), [G, 0.0, G], method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True)
    if not sol.success:
        raise SeelabError(f"Riccati integration failed: {sol.message}")
    return sol.sol, rhs


def make_lq_oracle(lam=-1.0, sigma0=0.5, Q=1.0, R=1.0, rho=0.2, G=1.0, N=20000, M=128, seed=0,
                   T=1.0, x0=1.0, checks=("bsde-oracle", "adjoint", "mp", "hjb", "smooth-relation")):
    """Scalar recursive LQ problem with a Riccati closed form.

    ``dX = (λ X + u) dt + σ0 dW``, ``k = Q x²/2 + R u²/2 - ρ y``,
    ``h = G x²/2``.  The optimal feedback is ``u = -S(t) x / R`` and
    ``V = S x²/2 + r``, ``p = S X``, ``q = S σ0``, ``P = Π``.
    """
    if not lam < 0:
        raise ConfigurationError("lam must be negative")
    space = GalerkinSpace(1, 1, np.array([1.0 - lam]), np.ones(1))
    fam = OperatorFamily.constant([[lam]], np.zeros((1, 1, 1)), delta=1.0, k_bound=0.0,
                                  a_bound=-lam / (1.0 - lam))
    dense, rhs = solve_lq_riccati(lam, sigma0, Q, R, rho, G, T)
    S = lambda t: float(dense(t)[0])  # noqa: E731

    def zeros(*shape):
        return lambda t, x, u: np.zeros((x.shape[0],) + shape)

    problem = ControlProblem(
        1, 1, 1,
        lambda t, x, u: u[:, :1].copy(),
        lambda t, x, u: np.full((x.shape[0], 1, 1), sigma0),
        lambda t, x, y, z, u: 0.5 * Q * x[:, 0]**2 + 0.5 * R * u[:, 0]**2 - rho * y,
        lambda x: 0.5 * G * x[:, 0]**2,
        a_x=zeros(1, 1), a_xx=zeros(1, 1, 1), b_x=zeros(1, 1, 1), b_xx=zeros(1, 1, 1, 1),
        k_x=lambda t, x, y, z, u: Q * x,
        k_y=lambda t, x, y, z, u: np.full(x.shape[0], -rho),
        k_z=lambda t, x, y, z, u: np.zeros((x.shape[0], 1)),
        k_hess=lambda t, x, y, z, u: _block_hessian(1, 1, xx=np.full((x.shape[0], 1, 1), Q)),
        h_x=lambda x: G * x,
        h_xx=lambda x: np.full((x.shape[0], 1, 1), G),
        name="lq-oracle",
    )

    def V_t(t, X):
        dS, dr, _ = rhs(t, dense(t))
        return 0.5 * dS * X[:, 0]**2 + dr

    V = AnalyticValue(lambda t, X: 0.5 * S(t) * X[:, 0]**2 + float(dense(t)[1]),
                      lambda t, X: S(t) * X,
                      lambda t, X: np.full((X.shape[0], 1, 1), S(t)),
                      V_t, name="S x^2/2 + r")
    oracle = Oracle(V=V, p=lambda t, X: S(t) * X,
                    q=lambda t, X: np.full((X.shape[0], 1, 1), S(t) * sigma0),
                    P=lambda t: np.array([[float(dense(t)[2])]]), rel_tol=5e-2)
    policy = FeedbackPolicy(lambda t, x: -S(t) * x / R)
    setup = ModelSetup(space, fam, problem, T=T, M=M, scheme="semi-implicit")
    params = {"lam": lam, "sigma0": sigma0, "Q": Q, "R": R, "rho": rho, "G": G}
    spec = ExperimentSpec("lq-oracle", "scalar recursive LQ problem with Riccati oracle", setup,
                          np.array([float(x0)]), ControlLattice(np.linspace(-2, 2, 9)[:, None]),
                          policy, N, seed, tuple(checks), oracle, params,
                          hjb_lattice=np.linspace(-6, 6, 4801)[:, None])
    return spec


def make_suboptimal_example(N=2000, M=64, seed=0, T=1.0):
    """``k = u²`` with ``U = {0, 1}`` and the deliberately wrong candidate ``u ≡ 1``."""
    space = GalerkinSpace(1, 1, np.array([2.0]), np.ones(1))
    fam = OperatorFamily.constant([[-1.0]], np.zeros((1, 1, 1)), 1.0, 0.0, 0.5)

    def zeros(*shape):
        return lambda t, x, u: np.zeros((x.shape[0],) + shape)

    problem = ControlProblem(
        1, 1, 1, zeros(1), lambda t, x, u: np.full((x.shape[0], 1, 1), 0.3),
        lambda t, x, y, z, u: u[:, 0]**2, lambda x: np.zeros(x.shape[0]),
        a_x=zeros(1, 1), a_xx=zeros(1, 1, 1), b_x=zeros(1, 1, 1), b_xx=zeros(1, 1, 1, 1),
        k_x=lambda t, x, y, z, u: np.zeros_like(x),
        k_y=lambda t, x, y, z, u: np.zeros(x.shape[0]),
        k_z=lambda t, x, y, z, u: np.zeros((x.shape[0], 1)),
        k_hess=lambda t, x, y, z, u: np.zeros((x.shape[0], 3, 3)),
        h_x=lambda x: np.zeros_like(x), h_xx=lambda x: np.zeros((x.shape[0], 1, 1)),
        name="suboptimal",
    )
    setup = ModelSetup(space, fam, problem, T=T, M=M)
    return ExperimentSpec("suboptimal", "u = 1 is not optimal for k = u^2", setup,
                          np.array([0.5]), ControlLattice([[0.0], [1.0]]),
                          ConstantPolicy(np.ones(1)), N, seed, ("mp",))


def make_quadratic_drift_problem(n=2, c=0.5, sigma=0.3, cubic=0.0):
    """``a(x) = c x² + cubic·x³`` coordinatewise with constant noise (remainder-order tests)."""
    space, fam = make_laplacian_space(n, 1)

    def a(t, x, u):
        return c * x**2 + cubic * x**3 + u[:, :1]

    def a_x(t, x, u):
        return np.einsum("pi,ij->pij", 2 * c * x + 3 * cubic * x**2, np.eye(n))

    def a_xx(t, x, u):
        out = np.zeros((x.shape[0], n, n, n))
        idx = np.arange(n)
        out[:, idx, idx, idx] = 2 * c + 6 * cubic * x
        return out

    problem = ControlProblem(
        n, 1, 1, a, lambda t, x, u: np.full((x.shape[0], n, 1), sigma),
        lambda t, x, y, z, u: np.zeros(x.shape[0]), lambda x: np.zeros(x.shape[0]),
        a_x=a_x, a_xx=a_xx,
        b_x=lambda t, x, u: np.zeros((x.shape[0], n, 1, n)),
        b_xx=lambda t, x, u: np.zeros((x.shape[0], n, 1, n, n)),
        name="quadratic-drift",
    )
    return space, fam, problem


# ----------------------------------------------------------------------------
# runner


class _Context:
    """Shared, lazily computed ensemble / BSDE / adjoint objects for one run."""

    def __init__(self, spec):
        self.spec = spec
        self._ens = self._bsde = self._adj = self._surrogate = None

    @property
    def ensemble(self):
        if self._ens is None:
            s = self.spec
            su = s.setup
            self._ens = simulate_forward(su.space, su.fam, su.problem, s.policy, s.x0,
                                         su.full_grid(), s.N, s.seed, scheme=su.scheme,
                                         workers=su.workers)
        return self._ens

    @property
    def bsde(self):
        if self._bsde is None:
            ens = self.ensemble
            self._bsde = solve_bsde(self.spec.setup.problem, ens,
                                    self.spec.setup.problem.h(ens.X[:, -1]), self.spec.setup.basis)
        return self._bsde

    @property
    def adjoint(self):
        if self._adj is None:
            su = self.spec.setup
            self._adj = solve_adjoints(su.space, su.fam, su.problem, self.ensemble, self.bsde,
                                       su.basis, workers=su.workers)
        return self._adj

    @property
    def surrogate(self):
        """Quadratic value fit on a cloud matching the spread of ``X̄(t)``."""
        if self._surrogate is None:
            s = self.spec
            n = s.setup.space.n
            count = (n + 1) * (n + 2) + 1
            ens = self.ensemble

            def points(t):
                X = ens.X[:, ens.grid.index(t)]
                centre = X.mean(axis=0)
                radius = 3.0 * X.std(axis=0) + 0.05 * (1.0 + np.abs(centre))
                rng = np.random.default_rng(derive_seed(s.seed, "surrogate-points", ens.grid.index(t)))
                return centre + radius * rng.uniform(-1, 1, size=(count, n))

            self._surrogate = FittedValue(s.setup, s.lattice, min(s.N, s.surrogate_paths),
                                          s.seed, points)
        return self._surrogate


def _opnorm(P):
    return np.linalg.norm(P, ord=2, axis=(-2, -1))


def _check_coercivity(spec, ctx):
    su = spec.setup
    knots = np.linspace(su.t0, su.T, 9)
    rep = check_coercivity(su.fam, su.space, knots, n_samples=10000, seed=spec.seed)
    return CheckResult("coercivity", rep.passed, rep.as_dict())


def _check_apriori(spec, ctx):
    su = spec.setup
    n = su.space.n
    z0 = spec.x0 if np.any(spec.x0) else np.ones(n) / np.sqrt(n)
    N = min(spec.N, 4000)
    ens = {c: simulate_linear(su.space, su.fam, c * z0, su.full_grid(), N, spec.seed,
                              scheme=su.scheme, workers=su.workers) for c in (1.0, 2.0, 4.0)}
    rep = check_apriori_moment(su.space, ens)
    # stay below the relaxation time of the stiffest mode, where sup|z - z0|² ~ rho
    lam_max = float(np.max(np.abs(np.linalg.eigvals(su.fam.evaluate(su.t0)[0]))))
    rho_max = min((su.T - su.t0) / 64, 0.25 / max(lam_max, 1e-12))
    cont = check_continuity_estimate(su.space, su.fam, su.problem, spec.x0,
                                     [rho_max / 8, rho_max / 4, rho_max / 2, rho_max], T=su.T,
                                     N=N, seed=spec.seed, M=min(su.M, 256),
                                     policy=spec.policy, scheme=su.scheme)
    return CheckResult("apriori", bool(rep["pass"] and cont["pass"]),
                       {"moments": rep, "continuity": cont})


def _check_bsde(spec, ctx):
    su = spec.setup
    ens, sol = ctx.ensemble, ctx.bsde
    mid = su.M // 2
    upper = backward_semigroup(su.problem, ens, sol.Y[:, mid], su.basis, 0, mid)
    flow_gap = abs(upper - sol.y0)
    summary = {"Y0": sol.y0, "se": sol.se, "picard_iters": sol.picard_iters,
               "resubstitution_gap": sol.residual, "flow_gap": flow_gap}
    ok = flow_gap <= spec.se_scale * sol.se + NUMERICAL_FLOOR
    series = [(float(t), "Y_mean", float(np.mean(sol.Y[:, i])),
               float(np.std(sol.Y[:, i]) / np.sqrt(spec.N)))
              for i, t in enumerate(ens.grid.knots)]
    if spec.oracle and spec.oracle.V is not None:
        exact = float(spec.oracle.V(su.t0, spec.x0[None])[0])
        err = abs(sol.y0 - exact)
        allow = (spec.se_scale * sol.se + spec.tol_scale * spec.oracle.rel_tol * abs(exact)
                 + NUMERICAL_FLOOR * (1 + abs(exact)))
        summary.update(oracle_value=exact, error=err, allowance=allow)
        ok = ok and err <= allow
    return CheckResult("bsde-oracle", bool(ok), summary, series)


def _check_adjoint(spec, ctx):
    su = spec.setup
    ens, adj = ctx.ensemble, ctx.adjoint
    grid = ens.grid
    P_sym = float(np.max(np.abs(adj.P - np.swapaxes(adj.P, -1, -2))))
    p_term = float(np.max(np.abs(adj.p[:, -1] - su.problem.h_x(ens.X[:, -1]))))
    P_term = float(np.max(np.abs(adj.P[:, -1] - su.problem.h_xx(ens.X[:, -1]))))
    summary = {"picard_iters": adj.picard_iters, "sup_change": adj.sup_change,
               "picard_history": adj.history, "geometric": adj.geometric, "se": adj.se,
               "P_symmetry": P_sym, "p_terminal_error": p_term, "P_terminal_error": P_term}
    ok = P_sym <= 1e-10 and p_term == 0.0 and P_term == 0.0
    steps = np.diff(adj.P, axis=1)
    summary["P_time_variation"] = float(np.mean(np.linalg.norm(steps, axis=(-2, -1))))
    series = []
    for i in range(0, grid.M + 1, max(1, grid.M // 32)):
        t = float(grid.knots[i])
        series.append((t, "p_norm", float(np.mean(np.linalg.norm(adj.p[:, i], axis=1))),
                       adj.se["p"]))
        series.append((t, "P_opnorm", float(np.mean(_opnorm(adj.P[:, i]))), adj.se["P"]))
    orc = spec.oracle
    if orc is not None and orc.p is not None:
        rel = orc.rel_tol * spec.tol_scale
        num = den = qerr = qden = 0.0
        Perr, Pscale = 0.0, 0.0
        for i, t in enumerate(grid.knots):
            x = ens.X[:, i]
            pe = orc.p(t, x)
            num += np.sum((adj.p[:, i] - pe)**2)
            den += np.sum(pe**2)
            if i < grid.M:
                qe = orc.q(t, x)
                qerr += np.sum((adj.q[:, i] - qe)**2)
                qden += np.sum(qe**2)
            Pe = orc.P(t)
            Perr = max(Perr, float(np.sqrt(np.mean(_opnorm(adj.P[:, i] - Pe)**2))))
            Pscale = max(Pscale, float(_opnorm(Pe)))
        cells = spec.N * (grid.M + 1)
        p_rel = float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num / cells))
        q_rms = float(np.sqrt(qerr / (spec.N * grid.M)))
        q_scale = float(np.sqrt(qden / (spec.N * grid.M)))
        p_ok = p_rel <= 5e-2 * spec.tol_scale
        q_ok = q_rms <= spec.se_scale * adj.se["q"] + rel * q_scale + NUMERICAL_FLOOR
        P_ok = Perr <= spec.se_scale * adj.se["P"] + rel * Pscale + NUMERICAL_FLOOR
        summary.update(p_rel_rms=p_rel, q_rms=q_rms, q_scale=q_scale, P_max_error=Perr,
                       P_scale=Pscale, p_ok=p_ok, q_ok=q_ok, P_ok=P_ok)
        ok = ok and p_ok and q_ok and P_ok
    return CheckResult("adjoint", bool(ok), summary, series)


def _check_ito(spec, ctx):
    su = spec.setup
    n, m = su.space.n, su.space.m
    z0 = spec.x0 if np.any(spec.x0) else np.ones(n) / np.sqrt(n)
    N = min(spec.N, 5000)
    grid = su.full_grid()
    common = dict(N=N, seed=derive_seed(spec.seed, "ito"), scheme=su.scheme, basis=su.basis,
                  workers=su.workers)
    forced = verify_ito_formula(su.space, su.fam, grid, z0, np.eye(n),
                                f=lambda i, P: 0.2 * P + 0.1 * np.eye(n), beta=0.5,
                                gamma1=lambda t: 0.3 * np.ones(n),
                                gamma2=lambda t: 0.2 * np.ones((n, m)), **common)
    homog = verify_ito_formula(su.space, su.fam, grid, z0, np.eye(n), beta=0.5, **common)
    tol = 5e-2 * spec.tol_scale
    summary = {"residual_rms": forced.residual_rms, "homogeneous_residual_rms": homog.residual_rms,
               "homogeneous_sigma_max": float(np.max(np.abs(homog.sigma_path))),
               "tolerance": tol}
    series = [(float(t), "sigma_mean", float(np.mean(forced.sigma_path[:, i])),
               float(np.std(forced.sigma_path[:, i]) / np.sqrt(N)))
              for i, t in enumerate(grid.knots)]
    ok = forced.residual_rms <= tol and homog.residual_rms <= tol
    return CheckResult("ito", bool(ok), summary, series)


def _check_mp(spec, ctx):
    rep = mp_residual(spec.setup.problem, ctx.ensemble, ctx.bsde, ctx.adjoint, spec.lattice.U_pts,
                      se_scale=spec.se_scale)
    grid = ctx.ensemble.grid
    cell_min = rep.residual.min(axis=2)
    series = [(float(grid.knots[i]), "min_residual", float(np.mean(cell_min[:, i])),
               float(np.std(cell_min[:, i]) / np.sqrt(spec.N))) for i in range(grid.M)]
    return CheckResult("mp", rep.passed, rep.as_dict(), series)


def _check_dpp(spec, ctx):
    su = spec.setup
    rows = []
    ok = True
    for frac in (8, 4, 2):
        r = check_dpp(su, su.t0, spec.x0, (su.T - su.t0) / frac, spec.lattice, spec.N, spec.seed,
                      surrogate=ctx.surrogate, se_scale=spec.se_scale)
        rows.append(r)
        ok = ok and r["pass"]
    along = check_value_along_optimal(su, ctx.ensemble, ctx.bsde, ctx.surrogate,
                                      [(su.T - su.t0) / 4], se_scale=spec.se_scale)
    ok = ok and along["pass"]
    summary = {"dpp": rows, "value_along_optimal": along}
    if spec.oracle and spec.oracle.V is not None:
        rng = np.random.default_rng(derive_seed(spec.seed, "value-probes"))
        probes = spec.x0 + rng.uniform(-1, 1, size=(5, su.space.n))
        vals = []
        for x in probes:
            est = estimate_value(su, su.t0, x, spec.lattice, spec.N, spec.seed)
            exact = float(spec.oracle.V(su.t0, x[None])[0])
            allow = (spec.se_scale * est.se + spec.tol_scale * spec.oracle.rel_tol * abs(exact)
                     + NUMERICAL_FLOOR * (1 + abs(exact)))
            vals.append({"x": x.tolist(), "estimate": est.value, "se": est.se, "exact": exact,
                         "pass": bool(abs(est.value - exact) <= allow)})
        summary["value_probes"] = vals
        ok = ok and all(v["pass"] for v in vals)
    series = [(r["t"] + r["delta"], "dpp_gap", r["gap"], r["se"]) for r in rows]
    return CheckResult("dpp", bool(ok), summary, series)


def _probe_sizes(x):
    return [s * max(float(np.linalg.norm(x)), 1.0) for s in (0.2, 0.1, 0.05, 0.025)]


def _check_inclusions(spec, ctx):
    su = spec.setup
    adj = ctx.adjoint
    sur = ctx.surrogate
    n = su.space.n
    sup = superdiff_inclusion_check(sur, su.t0, spec.x0[None], adj.p[:1, 0], adj.P[:1, 0],
                                    np.eye(n), _probe_sizes(spec.x0), se_scale=spec.se_scale)
    taus = [su.t0 + (su.T - su.t0) / d for d in (8, 16, 32)]
    tdc = time_diff_check(sur, su, ctx.ensemble, ctx.bsde, adj, 0, taus, cells=np.arange(1),
                          se_scale=spec.se_scale)
    return CheckResult("inclusions", bool(sup["pass"] and tdc["pass"]),
                       {"space": sup, "time": tdc})


def _pairs(spec, count=6):
    rng = np.random.default_rng(derive_seed(spec.seed, "pairs"))
    n = spec.setup.space.n
    spread = 0.5 * (1.0 + float(np.linalg.norm(spec.x0)))
    return spec.x0 + spread * rng.uniform(-1, 1, size=(count, 2, n))


_LAMBDAS = (0.25, 0.5, 0.75)


def _check_semiconcavity(spec, ctx):
    C, se = semiconcavity_probe(ctx.surrogate, spec.setup.t0, _pairs(spec), _LAMBDAS)
    allow = spec.semiconcavity_bound + spec.se_scale * se + NUMERICAL_FLOOR
    return CheckResult("semiconcavity", bool(np.isfinite(C) and C <= allow),
                       {"C": C, "se": se, "bound": spec.semiconcavity_bound, "allowance": allow})


def _check_convexity(spec, ctx):
    viol, se = convexity_probe(ctx.surrogate, spec.setup.t0, _pairs(spec), _LAMBDAS)
    allow = spec.se_scale * se + NUMERICAL_FLOOR
    return CheckResult("convexity", bool(viol <= allow),
                       {"violation": viol, "se": se, "allowance": allow})


def _check_hjb(spec, ctx):
    su = spec.setup
    V = spec.oracle.V
    lattice = spec.hjb_lattice if spec.hjb_lattice is not None else spec.lattice.U_pts
    rng = np.random.default_rng(derive_seed(spec.seed, "hjb-probes"))
    probes = spec.x0 + rng.uniform(-1, 1, size=(5, su.space.n))
    rows, ok = [], True
    for t in (su.t0, 0.5 * (su.t0 + su.T)):
        r = hjb_residual(V, su, t, probes, lattice)
        scale = np.abs(V.time_derivative(t, probes)) + np.abs(V(t, probes)) + 1.0
        allow = spec.tol_scale * (spec.oracle.rel_tol * scale) + NUMERICAL_FLOOR * scale
        rows.append({"t": t, "residual": r.tolist(), "allowance": allow.tolist()})
        ok = ok and bool(np.all(np.abs(r) <= allow))
    term = hjb_residual(V, su, su.T, probes, lattice)
    ok = ok and bool(np.all(np.abs(term) <= NUMERICAL_FLOOR * (1 + np.abs(V(su.T, probes)))))
    return CheckResult("hjb", ok, {"rows": rows, "terminal": term.tolist()})


def _check_smooth(spec, ctx):
    adj = ctx.adjoint
    rep = smooth_relation_check(spec.oracle.V, spec.setup, ctx.ensemble, adj.p, adj.q)
    rel = spec.oracle.rel_tol * spec.tol_scale
    p_ok = rep["p_rel_rms"] <= 5e-2 * spec.tol_scale
    q_ok = (rep["q_rms"] <= spec.se_scale * adj.se["q"] + NUMERICAL_FLOOR
            or (rel > 0 and rep["q_rel_rms"] <= rel))
    rep.update(p_ok=p_ok, q_ok=q_ok, q_se=adj.se["q"])
    return CheckResult("smooth-relation", bool(p_ok and q_ok), rep)


_RUNNERS = {
    "coercivity": _check_coercivity,
    "apriori": _check_apriori,
    "bsde-oracle": _check_bsde,
    "adjoint": _check_adjoint,
    "ito": _check_ito,
    "mp": _check_mp,
    "dpp": _check_dpp,
    "inclusions": _check_inclusions,
    "semiconcavity": _check_semiconcavity,
    "convexity": _check_convexity,
    "hjb": _check_hjb,
    "smooth-relation": _check_smooth,
}


def min_paths(spec):
    """Fewest paths for which regression standard errors are trusted (10 per feature)."""
    return 10 * spec.setup.basis.n_features(spec.setup.space.n)


def run_experiment(spec, only=None):
    """Run the enabled checks in dependency order; errors abort only their check."""
    checks = [c for c in CHECKS if c in spec.checks and (only is None or c in only)]
    ctx = _Context(spec)
    results = {}
    if checks:
        need = min_paths(spec)
        results["sampling"] = CheckResult("sampling", spec.N >= need,
                                          {"paths": spec.N, "min_paths": need})
    for name in checks:
        try:
            results[name] = _RUNNERS[name](spec, ctx)
        except (SeelabError, InvalidArgumentError, ArithmeticError) as exc:
            results[name] = CheckResult(name, False, {},
                                        error=f"{type(exc).__name__}: {exc}")
        except Exception as exc:  # recorded, not swallowed: the report shows the trace
            results[name] = CheckResult(name, False, {}, error="".join(
                traceback.format_exception_only(type(exc), exc)).strip())
    return ExperimentReport(spec.name, spec.resolved_config(), results, time.time())


BUILTINS = {
    "linear-example2": (make_linear_example,
                        "Linear SEE with control in the noise; closed forms V=<a,x>, p=a, q=0, P=0"),
    "heat-example1": (make_heat_control_problem,
                      "Controlled stochastic heat equation, nonlinear smooth coefficients"),
    "lq-oracle": (make_lq_oracle,
                  "Scalar recursive LQ problem checked against a Riccati ODE solution"),
}


def build_builtin(name, **overrides):
    """Instantiate a built-in spec; ``overrides`` use the builder's keyword names."""
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown experiment {name!r}; try one of {sorted(BUILTINS)}")
    builder = BUILTINS[name][0]
    try:
        return builder(**overrides)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from exc
