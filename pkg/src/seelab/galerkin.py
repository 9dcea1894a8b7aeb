"""Spectral truncation of the Gelfand triple and the operator families.

Coordinates are taken in an orthonormal basis of H that diagonalises the
embedding V -> H, so the triple is described by a vector of weights
``w_i >= 1`` with ``|u|_V^2 = sum w_i u_i^2`` and ``|u|_{V*}^2 = sum u_i^2 / w_i``.
The duality pairing is the Euclidean inner product.  The noise covariance
square root is folded into every noise-facing coefficient, so Hilbert-Schmidt
norms on L_2^0 are plain Frobenius norms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "GalerkinSpace",
    "OperatorFamily",
    "CoercivityReport",
    "make_laplacian_space",
    "check_coercivity",
    "check_quasi_skew",
]


@dataclass(frozen=True)
class GalerkinSpace:
    """Finite truncation of V ⊂ H ⊂ V* with ``m`` retained noise modes."""

    n: int
    m: int
    v_weights: np.ndarray
    q_sqrt: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.v_weights, dtype=float)
        q = np.asarray(self.q_sqrt, dtype=float)
        if self.n < 1 or self.m < 1:
            raise InvalidArgumentError("n and m must be >= 1")
        if w.shape != (self.n,) or q.shape != (self.m,):
            raise InvalidArgumentError("v_weights must have length n and q_sqrt length m")
        if np.any(w < 1.0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError("v_weights must be finite and >= 1")
        if np.any(q < 0.0):
            raise InvalidArgumentError("q_sqrt must be nonnegative")
        w.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "v_weights", w)
        object.__setattr__(self, "q_sqrt", q)

    def norm_h(self, u):
        return np.sqrt(np.sum(np.square(u), axis=-1))

    def norm_v(self, u):
        return np.sqrt(np.sum(self.v_weights * np.square(u), axis=-1))

    def norm_vstar(self, u):
        return np.sqrt(np.sum(np.square(u) / self.v_weights, axis=-1))


def _constant(value):
    value = np.asarray(value, dtype=float)
    value.setflags(write=False)
    return lambda t: value


@dataclass(frozen=True)
class OperatorFamily:
    """Time-dependent linear operators A(t): V -> V* and B(t): V -> L_2^0.

    ``A(t)`` returns an ``(n, n)`` matrix.  ``B(t)`` returns an ``(m, n, n)``
    stack whose ``j``-th slice acts on the ``j``-th (covariance-absorbed) noise
    mode.  ``a_bound`` bounds ``|A(t)u|_{V*} / |u|_V``; when omitted it equals
    ``k_bound``.
    """

    A: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    delta: float
    k_bound: float
    a_bound: float | None = None
    deterministic: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError("coercivity margin delta must be > 0")
        if self.k_bound < 0:
            raise InvalidArgumentError("k_bound must be >= 0")
        if self.a_bound is None:
            object.__setattr__(self, "a_bound", float(self.k_bound))

    @classmethod
    def constant(cls, A, B, delta, k_bound, a_bound=None):
        """Family with time-independent matrices."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if B.ndim == 2:
            B = B[None]
        return cls(_constant(A), _constant(B), float(delta), float(k_bound),
                   None if a_bound is None else float(a_bound))

    def evaluate(self, t):
        A = np.asarray(self.A(t), dtype=float)
        B = np.asarray(self.B(t), dtype=float)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidArgumentError(f"operator family is not finite at t={t}")
        return A, B

    def is_zero_b(self, t_grid: Sequence[float]) -> bool:
        return all(not np.any(self.B(t)) for t in t_grid)


@dataclass(frozen=True)
class CoercivityReport:
    n_samples: int
    worst_coercivity_slack: float
    worst_dualnorm_slack: float
    worst_skew_slack: float
    tolerance: float = 1e-10
    passed: bool = field(init=False)

    def __post_init__(self):
        ok = min(self.worst_coercivity_slack, self.worst_dualnorm_slack,
                 self.worst_skew_slack) >= -self.tolerance
        object.__setattr__(self, "passed", bool(ok))

    def as_dict(self):
        return {
            "n_samples": self.n_samples,
            "worst_coercivity_slack": self.worst_coercivity_slack,
            "worst_dualnorm_slack": self.worst_dualnorm_slack,
            "worst_skew_slack": self.worst_skew_slack,
            "pass": self.passed,
        }


def make_laplacian_space(n, m, domain_length=1.0, q_decay=0.0):
    """Sine-mode truncation of the Dirichlet Laplacian on ``(0, L)``.

    Returns the space together with the heat family ``A = diag(-(iπ/L)^2)``,
    ``B = 0``.  The constants are the smallest ones the diagonal structure
    allows with ``delta = 1``: ``K = max(0, 1 - λ_1)`` and
    ``a_bound = max λ_i / (1 + λ_i)``.
    """
    if n < 1 or m < 1:
        raise InvalidArgumentError("n and m must be >= 1")
    if not domain_length > 0:
        raise InvalidArgumentError("domain_length must be > 0")
    lam = (np.arange(1, n + 1) * np.pi / domain_length) ** 2
    space = GalerkinSpace(n, m, 1.0 + lam, (1.0 + np.arange(m)) ** (-float(q_decay)))
    fam = OperatorFamily.constant(
        np.diag(-lam),
        np.zeros((m, n, n)),
        delta=1.0,
        k_bound=max(0.0, 1.0 - lam[0]),
        a_bound=float(np.max(lam / (1.0 + lam))),
    )
    return space, fam


def _unit_samples(n, n_samples, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_samples, n))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _validate(t_grid, n_samples):
    if len(t_grid) == 0:
        raise InvalidArgumentError("t_grid must not be empty")
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")


def _coercivity_slacks(fam, space, t, u):
    A, B = fam.evaluate(t)
    Au = u @ A.T
    Bu = np.einsum("jik,sk->sij", B, u)
    lhs = 2.0 * np.sum(Au * u, axis=1) + np.sum(Bu**2, axis=(1, 2))
    rhs = -fam.delta * space.norm_v(u) ** 2 + fam.k_bound * space.norm_h(u) ** 2
    dual = fam.a_bound * space.norm_v(u) - space.norm_vstar(Au)
    return rhs - lhs, dual


def check_coercivity(fam, space, t_grid, n_samples=1000, seed=0, tolerance=1e-10):
    """Falsification test of the coercivity inequality on random unit vectors.

    The dual-norm condition is checked against ``fam.a_bound``.  The skew
    slack is filled in from :func:`check_quasi_skew` on the same samples.
    """
    _validate(t_grid, n_samples)
    u = _unit_samples(space.n, n_samples, seed)
    c1, c2, c3 = np.inf, np.inf, np.inf
    for t in t_grid:
        s1, s2 = _coercivity_slacks(fam, space, t, u)
        c1 = min(c1, float(s1.min()))
        c2 = min(c2, float(s2.min()))
        c3 = min(c3, float(_skew_slack(fam, space, t, u).min()))
    return CoercivityReport(n_samples, c1, c2, c3, tolerance)


def _skew_slack(fam, space, t, u):
    _, B = fam.evaluate(t)
    # <B_j u, u>; q_sqrt is already folded into B_j.
    forms = np.einsum("si,jik,sk->sj", u, B, u)
    return fam.k_bound * space.norm_h(u) ** 2 - np.linalg.norm(forms, axis=1)


def check_quasi_skew(fam, space, t_grid, n_samples=1000, seed=0, tolerance=1e-10):
    """Falsification test of the quasi-skew-symmetry inequality alone."""
    _validate(t_grid, n_samples)
    u = _unit_samples(space.n, n_samples, seed)
    worst = min(float(_skew_slack(fam, space, t, u).min()) for t in t_grid)
    return CoercivityReport(n_samples, np.inf, np.inf, worst, tolerance)
