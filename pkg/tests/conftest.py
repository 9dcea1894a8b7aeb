import numpy as np
import pytest

from seelab.galerkin import GalerkinSpace, OperatorFamily
from seelab.problem import ControlProblem


def zeros_like_rows(*shape):
    return lambda t, x, u: np.zeros((x.shape[0],) + shape)


def scalar_setup(lam=-1.0, m=1):
    """One mode with ``A = lam`` and unit weights (``V = H``)."""
    space = GalerkinSpace(1, m, np.array([1.0 - lam if lam < 0 else 1.0]), np.ones(m))
    fam = OperatorFamily.constant([[lam]], np.zeros((m, 1, 1)), 1.0, max(0.0, 1.0 + 2 * lam),
                                  None)
    return space, fam


def linear_problem(n=1, m=1, b=0.0, k=None, h=None, a=None, full=True):
    """``a = 0`` (or ``a``), constant diffusion ``b``, generator ``k`` and terminal ``h``."""
    bconst = np.broadcast_to(np.asarray(b, dtype=float), (n, m))
    kw = {}
    if full:
        kw = dict(
            a_x=zeros_like_rows(n, n), a_xx=zeros_like_rows(n, n, n),
            b_x=zeros_like_rows(n, m, n), b_xx=zeros_like_rows(n, m, n, n),
            k_x=lambda t, x, y, z, u: np.zeros_like(x),
            k_y=lambda t, x, y, z, u: np.zeros(x.shape[0]),
            k_z=lambda t, x, y, z, u: np.zeros((x.shape[0], m)),
            k_hess=lambda t, x, y, z, u: np.zeros((x.shape[0], n + 1 + m, n + 1 + m)),
            h_x=lambda x: np.zeros_like(x),
            h_xx=lambda x: np.zeros((x.shape[0], n, n)),
        )
    return ControlProblem(
        n, m, 1,
        a or (lambda t, x, u: np.zeros_like(x)),
        lambda t, x, u: np.broadcast_to(bconst, (x.shape[0], n, m)).copy(),
        k or (lambda t, x, y, z, u: np.zeros(x.shape[0])),
        h or (lambda x: np.zeros(x.shape[0])),
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
