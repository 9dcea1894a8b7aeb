"""NumPy implementations of the propagator kernels (import fallback)."""
import numpy as np


def backward_congruence(E, S, terminal, dts, R, start, stop):
    sl = slice(start, stop)
    M = E.shape[1]
    R[sl, M] = terminal[sl]
    for i in range(M - 1, -1, -1):
        Ei = E[sl, i]
        R[sl, i] = np.einsum("pba,pbc->pac", Ei, np.einsum("pab,pbc->pac", R[sl, i + 1], Ei))
        if S is not None:
            R[sl, i] += dts[i] * S[sl, i]


def forward_flow(E, x0, out, start, stop):
    sl = slice(start, stop)
    out[sl, 0] = x0[sl]
    for i in range(E.shape[1]):
        out[sl, i + 1] = np.einsum("pab,pb->pa", E[sl, i], out[sl, i])


def batched_matmul(L, Rm, out, start, stop):
    sl = slice(start, stop)
    Ls = L if L.shape[0] == 1 else L[sl]
    out[sl] = np.einsum("piab,pibc->piac", np.broadcast_to(Ls, Rm[sl].shape), Rm[sl])
