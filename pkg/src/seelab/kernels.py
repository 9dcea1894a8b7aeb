"""Hot loops of the propagator machinery, compiled when available.

The Cython extension ``seelab._ckernels`` is used if it imports, otherwise the
NumPy fallback.  Set ``SEELAB_PURE_PYTHON=1`` to force the fallback.  Every
kernel is row-local in the path index, so results do not depend on
``workers``; the two backends agree to rounding (different summation order).
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels
from .rng import chunk_bounds

_ext = None
if os.environ.get("SEELAB_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext
    if backend == "numpy":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")


def _run(fn, n_paths, workers, *args):
    bounds = chunk_bounds(n_paths, workers)
    if len(bounds) == 1:
        fn(*args, 0, n_paths)
        return
    with ThreadPoolExecutor(len(bounds)) as pool:
        list(pool.map(lambda b: fn(*args, b[0], b[1]), bounds))


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def backward_congruence(E, S, terminal, dts, workers=1, backend=None):
    """Backward accumulation ``R_i = E_i^T R_{i+1} E_i + dt_i S_i``.

    ``E`` and ``S`` have shape ``(N, M, n, n)`` (``S`` may be None), the
    terminal ``(N, n, n)``.  Returns ``R`` of shape ``(N, M+1, n, n)``.
    """
    E = _c(E)
    N, M, n, _ = E.shape
    R = np.empty((N, M + 1, n, n))
    _run(_impl(backend).backward_congruence, N, workers,
         E, None if S is None else _c(S), _c(terminal), _c(dts), R)
    return R


def forward_flow(E, x0, workers=1, backend=None):
    """Homogeneous flow ``x_{i+1} = E_i x_i``; returns ``(N, M+1, n)``."""
    E = _c(E)
    N, M, n, _ = E.shape
    out = np.empty((N, M + 1, n))
    _run(_impl(backend).forward_flow, N, workers, E, _c(np.broadcast_to(x0, (N, n))), out)
    return out


def batched_matmul(L, Rm, workers=1, backend=None):
    """``L[p, i] @ Rm[p, i]``; ``L`` may be ``(1, M, n, n)`` (shared by all paths)."""
    Rm = _c(Rm)
    out = np.empty_like(Rm)
    _run(_impl(backend).batched_matmul, Rm.shape[0], workers, _c(L), Rm, out)
    return out
