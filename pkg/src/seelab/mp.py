"""Hamiltonian and the second-order maximum-principle inequality."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = ["hamiltonian", "MPReport", "mp_residual", "example2_sufficiency_check"]


def _pair(p, b):
    """``<p, b>`` in the noise modes: ``(N, n) x (N, n, m) -> (N, m)``."""
    return np.sum(p[:, :, None] * b, axis=1)


def hamiltonian(t, x, y, z, v, p, q, problem, ref_b):
    """``<p, a(v)> + <q, b(v)> + k(t, x, y, z + <p, b(v) - ref_b>, v)``.

    ``ref_b`` is ``b(t, X̄(t), ū(t))``, shape ``(N, n, m)``; ``q`` is ``(N, n, m)``
    and the noise pairings are Frobenius sums.
    """
    v = np.broadcast_to(np.asarray(v, dtype=float), (x.shape[0], problem.du))
    a = problem.a(t, x, v)
    b = problem.b(t, x, v)
    shift = _pair(p, b - ref_b)
    return (np.sum(p * a, axis=1) + np.sum(q * b, axis=(1, 2))
            + problem.k(t, x, y, z + shift, v))


@dataclass
class MPReport:
    """Residuals ``residual[path, step, v]`` over the control lattice."""

    residual: np.ndarray
    lattice: np.ndarray
    min_residual: float
    residual_at_optimal: float
    fraction_violating: float
    tol: float
    passed: bool

    def as_dict(self):
        return {
            "min_residual": self.min_residual,
            "residual_at_optimal": self.residual_at_optimal,
            "fraction_violating": self.fraction_violating,
            "tol": self.tol,
            "pass": self.passed,
        }


def mp_residual(problem, ensemble, bsde, adjoint, lattice, tol=None, se_scale=3.0):
    """Evaluate the maximum-principle bracket at every path, step and lattice point.

    ``residual(v) = H(v) - H(ū) + 1/2 sum_j <P Δb_j, Δb_j>`` with
    ``Δb = b(v) - b(ū)``.  The default tolerance is ``se_scale`` times the
    pooled standard error of the adjoint regressions, scaled by the size of
    the coefficient differences, plus ``1e-8``.
    """
    lattice = np.atleast_2d(np.asarray(lattice, dtype=float))
    if lattice.size == 0:
        raise InvalidArgumentError("control lattice is empty")
    if lattice.shape[1] != problem.du:
        raise InvalidArgumentError(f"lattice points must have {problem.du} components")
    grid, X, U = ensemble.grid, ensemble.X, ensemble.U_applied
    N, M, K = ensemble.N, grid.M, lattice.shape[0]
    res = np.empty((N, M, K))
    at_opt = 0.0
    spread = 0.0
    for i, t in enumerate(grid.knots[:-1]):
        x, u = X[:, i], U[:, i]
        y, z = bsde.Y[:, i], bsde.Z[:, i]
        p, q, P = adjoint.p[:, i], adjoint.q[:, i], adjoint.P[:, i]
        ref_b = problem.b(t, x, u)
        ref_a = problem.a(t, x, u)
        h_ref = hamiltonian(t, x, y, z, u, p, q, problem, ref_b)
        # the v = ū term through the same code path; cancels exactly
        opt = hamiltonian(t, x, y, z, u, p, q, problem, ref_b) - h_ref
        at_opt = max(at_opt, float(np.max(np.abs(opt))))
        for kk, v in enumerate(lattice):
            vv = np.broadcast_to(v, u.shape)
            db = problem.b(t, x, vv) - ref_b
            quad = np.einsum("pam,pab,pbm->p", db, P, db)
            res[:, i, kk] = hamiltonian(t, x, y, z, vv, p, q, problem, ref_b) - h_ref + 0.5 * quad
            da = problem.a(t, x, vv) - ref_a
            spread = max(spread, float(np.max(np.abs(da))), float(np.max(np.abs(db))),
                         float(np.max(np.abs(db)))**2)
    if tol is None:
        tol = se_scale * adjoint.pooled_se * (1.0 + spread) + 1e-8
    cell_min = np.minimum(res.min(axis=2), 0.0)
    frac = float(np.mean(cell_min < -tol))
    return MPReport(res, lattice, float(res.min()), at_opt, frac, float(tol),
                    bool(frac == 0.0 and float(cell_min.max()) <= tol))


def example2_sufficiency_check(f, a, b, lattice, z_grid, base=None):
    """``f(z + <a, b (u - ū)>) - f(z) >= 0`` for every lattice ``u`` and grid ``z``.

    ``b`` is the control-to-noise map, an ``(n, du)`` array for one noise mode
    or ``(n, m, du)``; ``base`` defaults to the first lattice point.  ``f``
    takes an ``(G, m)`` array of noise-mode values and returns ``(G,)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 2:
        b = b[:, None, :]
    lattice = np.atleast_2d(np.asarray(lattice, dtype=float))
    base = lattice[0] if base is None else np.asarray(base, dtype=float)
    z = np.asarray(z_grid, dtype=float).reshape(-1, b.shape[1])
    f0 = np.asarray(f(z), dtype=float)
    for u in lattice:
        shift = np.einsum("i,ijk,k->j", a, b, u - base)
        if np.any(np.asarray(f(z + shift), dtype=float) - f0 < 0):
            return False
    return True
