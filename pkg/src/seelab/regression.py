"""Least-squares conditional expectations on polynomial features."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, NumericalFailureError

__all__ = ["RegressionBasis", "RegressionFit", "Projector"]


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of total degree ``<= degree`` in the first ``n_feat`` coordinates.

    Non-constant columns are standardised on the fitting sample before the
    ridge penalty is applied, and the intercept is never penalised.  One
    step of iterated Tikhonov refinement follows the ridge solve, so the
    shrinkage bias on well-conditioned directions is of order ``ridge²``.  Columns
    with zero spread (deterministic states) are dropped, which makes the
    regression exact on degenerate ensembles.
    """

    degree: int = 2
    n_feat: int | None = None
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise InvalidArgumentError("degree must be >= 0")
        if self.ridge < 0:
            raise InvalidArgumentError("ridge must be >= 0")

    def n_features(self, n):
        k = n if self.n_feat is None else min(self.n_feat, n)
        return comb(k + self.degree, self.degree)

    def features(self, x, t=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = x.shape[1] if self.n_feat is None else min(self.n_feat, x.shape[1])
        cols = [np.ones(x.shape[0])]
        for deg in range(1, self.degree + 1):
            for idx in combinations_with_replacement(range(k), deg):
                col = x[:, idx[0]].copy()
                for j in idx[1:]:
                    col *= x[:, j]
                cols.append(col)
        return np.stack(cols, axis=1)

    def projector(self, x, t=None):
        """Factor the normal equations once for repeated projections onto ``x``."""
        return Projector(self, x, t)

    def fit(self, x, y, t=None):
        """Fit ``E[y | x]``; ``y`` may carry trailing target dimensions."""
        return self.projector(x, t).fit(y)

    def project(self, x, y, t=None):
        """Fitted values of ``E[y | x]`` at the sample points."""
        return self.projector(x, t).project(y)


class Projector:
    """Standardised design matrix and Cholesky factor for one sample of states."""

    def __init__(self, basis, x, t=None):
        self.basis = basis
        phi = basis.features(x, t)[:, 1:]
        self.N = phi.shape[0]
        self.zs = self.keep = self.scaling = self._cf = self._gram = None
        if phi.shape[1] == 0:
            return
        mu = phi.mean(axis=0)
        sd = phi.std(axis=0)
        keep = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
        if not np.any(keep):
            return
        self.keep, self.scaling = keep, (mu[keep], sd[keep])
        self.zs = (phi[:, keep] - mu[keep]) / sd[keep]
        self._gram = self.zs.T @ self.zs / self.N
        gram = self._gram.copy()
        gram[np.diag_indices_from(gram)] += basis.ridge
        try:
            self._cf = scipy.linalg.cho_factor(gram, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            hint = " (set ridge > 0)" if basis.ridge == 0 else ""
            raise NumericalFailureError(f"normal equations are singular{hint}") from exc
        if basis.ridge == 0 and np.linalg.cond(gram) > 1e12:
            raise NumericalFailureError("normal equations are rank deficient (set ridge > 0)")

    def _solve(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.N:
            raise InvalidArgumentError(f"target has {y.shape[0]} rows, expected {self.N}")
        flat = y.reshape(self.N, -1)
        mean_y = flat.mean(axis=0)
        coef = None
        if self.zs is not None:
            rhs = self.zs.T @ (flat - mean_y) / self.N
            coef = scipy.linalg.cho_solve(self._cf, rhs)
            if self.basis.ridge > 0:
                coef += scipy.linalg.cho_solve(self._cf, rhs - self._gram @ coef)
        return y.shape, mean_y, coef

    def fit(self, y):
        shape, mean_y, coef = self._solve(y)
        return RegressionFit(self.basis, self.keep, self.scaling, coef, mean_y, shape[1:])

    def project(self, y):
        shape, mean_y, coef = self._solve(y)
        out = np.broadcast_to(mean_y, (self.N, mean_y.size)).copy()
        if coef is not None:
            out += self.zs @ coef
        return out.reshape(shape)


@dataclass
class RegressionFit:
    basis: RegressionBasis
    keep: np.ndarray | None
    scaling: tuple | None
    coef: np.ndarray | None
    intercept: np.ndarray
    target_shape: tuple

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        N = x.shape[0]
        out = np.broadcast_to(self.intercept, (N, self.intercept.size)).copy()
        if self.coef is not None:
            phi = self.basis.features(x)[:, 1:]
            zs = (phi[:, self.keep] - self.scaling[0]) / self.scaling[1]
            out += zs @ self.coef
        return out.reshape((N,) + tuple(self.target_shape))
