"""Control problem coefficients and control policies.

All coefficient callbacks are vectorised over paths.  With ``N`` paths, state
``x`` has shape ``(N, n)``, controls ``u`` shape ``(N, du)``, ``y`` shape
``(N,)`` and ``z`` shape ``(N, m)``.  Shapes returned:

=========  ======================  ===========================================
callback   shape                   meaning
=========  ======================  ===========================================
a          (N, n)                  drift beyond ``A(t)x``
a_x        (N, n, n)               ``[.., i, k] = d a_i / d x_k``
a_xx       (N, n, n, n)            ``[.., i, k, l] = d2 a_i / d x_k d x_l``
b          (N, n, m)               diffusion beyond ``B(t)x``, column per mode
b_x        (N, n, m, n)            derivative of ``b[.., i, j]`` in ``x_k``
b_xx       (N, n, m, n, n)
k          (N,)                    generator of the recursive utility
k_x, k_z   (N, n), (N, m)
k_y        (N,)
k_hess     (N, n+1+m, n+1+m)       Hessian in the stacked variable (x, y, z)
h, h_x,    (N,), (N, n),
h_xx       (N, n, n)
=========  ======================  ===========================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError, UnsupportedProblemError

__all__ = [
    "ControlProblem",
    "ConstantPolicy",
    "PiecewiseConstantPolicy",
    "FeedbackPolicy",
    "bmv",
    "apply_noise_operator",
]


def bmv(mats, x):
    """Batched matrix-vector product, row-local so chunking never changes bits."""
    mats = np.asarray(mats)
    if mats.ndim == 2:
        mats = mats[None]
    return np.sum(mats * x[:, None, :], axis=-1)


def apply_noise_operator(B, x):
    """``(B x)[:, :, j] = B_j x`` for a stack ``B`` of shape ``(m, n, n)``."""
    if not B.any():
        return np.zeros((x.shape[0], B.shape[1], B.shape[0]))
    return np.sum(B[None, :, :, :] * x[:, None, None, :], axis=-1).transpose(0, 2, 1)


@dataclass
class ControlProblem:
    """Coefficients ``a, b, k, h`` of a recursive control problem.

    Derivative callbacks are optional; operations that need one raise
    :class:`UnsupportedProblemError` when it is missing.
    """

    n: int
    m: int
    du: int
    a: Callable
    b: Callable
    k: Callable
    h: Callable
    a_x: Optional[Callable] = None
    a_xx: Optional[Callable] = None
    b_x: Optional[Callable] = None
    b_xx: Optional[Callable] = None
    k_x: Optional[Callable] = None
    k_y: Optional[Callable] = None
    k_z: Optional[Callable] = None
    k_hess: Optional[Callable] = None
    h_x: Optional[Callable] = None
    h_xx: Optional[Callable] = None
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    def require(self, *names):
        missing = [nm for nm in names if getattr(self, nm) is None]
        if missing:
            raise UnsupportedProblemError(
                f"{self.name}: missing derivative callbacks {', '.join(missing)}")

    def shifted(self, constant):
        """Same problem with ``constant`` added to the generator ``k``."""
        k = self.k
        clone = ControlProblem(**{f: getattr(self, f) for f in self.__dataclass_fields__})
        clone.k = lambda t, x, y, z, u: k(t, x, y, z, u) + constant
        return clone


class ConstantPolicy:
    """Open-loop policy that always applies ``value``."""

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def __call__(self, t, x, paths):
        return np.broadcast_to(self.value, (x.shape[0], self.value.size))

    def __repr__(self):
        return f"ConstantPolicy({self.value.tolist()})"


class PiecewiseConstantPolicy:
    """Deterministic control switching between ``S`` equal sub-intervals.

    ``values[s]`` is applied on ``[t0 + s L/S, t0 + (s+1) L/S)`` where
    ``L = T - t0``; the last value is also used at ``T``.
    """

    def __init__(self, values, t0, T):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if T <= t0:
            raise InvalidArgumentError("policy horizon must satisfy t0 < T")
        self.t0, self.T = float(t0), float(T)

    def value_at(self, t):
        S = self.values.shape[0]
        s = int(np.floor((t - self.t0) / (self.T - self.t0) * S + 1e-9))
        return self.values[min(max(s, 0), S - 1)]

    def __call__(self, t, x, paths):
        v = self.value_at(t)
        return np.broadcast_to(v, (x.shape[0], v.size))

    def __repr__(self):
        return f"PiecewiseConstantPolicy({self.values.tolist()}, {self.t0}, {self.T})"


class FeedbackPolicy:
    """Markov feedback ``u = fn(t, x)``."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, x, paths):
        return np.asarray(self.fn(t, x), dtype=float).reshape(x.shape[0], -1)
