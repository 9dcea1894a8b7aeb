# cython: language_level=3
"""Compiled kernels for the propagator sweeps.

Each kernel works on a half-open path range so the Python layer can split
paths across threads; the arithmetic per path never depends on the split.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef void _congruence_range(const double[:, :, :, ::1] E,
                            const double[:, :, :, ::1] S,
                            double[:, :, :, ::1] R,
                            const double[::1] dts,
                            bint has_s,
                            Py_ssize_t start, Py_ssize_t stop) noexcept nogil:
    cdef Py_ssize_t M = E.shape[1]
    cdef Py_ssize_t n = E.shape[2]
    cdef Py_ssize_t p, i, a, b, c
    cdef double acc
    cdef double* tmp = <double*> malloc(n * n * sizeof(double))
    for p in range(start, stop):
        for i in range(M - 1, -1, -1):
            # tmp = R_{i+1} E_i
            for a in range(n):
                for c in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + R[p, i + 1, a, b] * E[p, i, b, c]
                    tmp[a * n + c] = acc
            # R_i = E_i^T tmp + dt S_i
            for a in range(n):
                for c in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + E[p, i, b, a] * tmp[b * n + c]
                    if has_s:
                        acc = acc + dts[i] * S[p, i, a, c]
                    R[p, i, a, c] = acc
    free(tmp)


def backward_congruence(const double[:, :, :, ::1] E, S, const double[:, :, ::1] terminal,
                        const double[::1] dts, double[:, :, :, ::1] R,
                        Py_ssize_t start, Py_ssize_t stop):
    """Fill ``R[p, i] = E_i^T R[p, i+1] E_i + dt_i S_i`` for paths in range."""
    cdef Py_ssize_t M = E.shape[1]
    cdef const double[:, :, :, ::1] Sv
    cdef bint has_s = S is not None
    Sv = S if has_s else E
    R[start:stop, M, :, :] = terminal[start:stop]
    with nogil:
        _congruence_range(E, Sv, R, dts, has_s, start, stop)


def forward_flow(const double[:, :, :, ::1] E, const double[:, ::1] x0, double[:, :, ::1] out,
                 Py_ssize_t start, Py_ssize_t stop):
    """``out[p, i+1] = E[p, i] out[p, i]`` with ``out[p, 0] = x0[p]``."""
    cdef Py_ssize_t M = E.shape[1]
    cdef Py_ssize_t n = E.shape[2]
    cdef Py_ssize_t p, i, a, b
    cdef double acc
    with nogil:
        for p in range(start, stop):
            for a in range(n):
                out[p, 0, a] = x0[p, a]
            for i in range(M):
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + E[p, i, a, b] * out[p, i, b]
                    out[p, i + 1, a] = acc


def batched_matmul(const double[:, :, :, ::1] L, const double[:, :, :, ::1] Rm,
                   double[:, :, :, ::1] out, Py_ssize_t start, Py_ssize_t stop):
    """``out[p, i] = L[p or 0, i] @ Rm[p, i]``; ``L`` may have a single leading row."""
    cdef Py_ssize_t M = Rm.shape[1]
    cdef Py_ssize_t n = Rm.shape[2]
    cdef bint shared = L.shape[0] == 1
    cdef Py_ssize_t p, pl, i, a, b, c
    cdef double acc
    with nogil:
        for p in range(start, stop):
            pl = 0 if shared else p
            for i in range(M):
                for a in range(n):
                    for c in range(n):
                        acc = 0.0
                        for b in range(n):
                            acc = acc + L[pl, i, a, b] * Rm[p, i, b, c]
                        out[p, i, a, c] = acc
