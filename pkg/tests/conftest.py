import numpy as np
import pytest

from boxmpc.jacobian import Dims, JacobianView
from boxmpc.model import StageLinearizations

# dimensions of the reference sparsity-pattern example used throughout
FIG_DIMS = Dims(n_a=2, n_b=4, n_u=2, n_y=2, Nu=4, Np=10)


def random_stages(rng, dims, scale=1.0):
    ny, nu = dims.n_y, dims.n_u
    out = []
    for _ in range(dims.Np):
        out.append(StageLinearizations(
            A=[scale * rng.standard_normal((ny, ny)) for _ in range(dims.n_a + 1)],
            B=[scale * rng.standard_normal((ny, nu)) for _ in range(dims.n_b)],
            affine_term=np.zeros(ny)))
    return out


def random_view(rng, dims, scale=1.0, weights=None):
    if weights is None:
        weights = rng.uniform(0.5, 2.0, dims.n)
    return JacobianView(weights, dims, stages=random_stages(rng, dims, scale))


def zero_coefficient_view(dims, weights=None):
    ny, nu = dims.n_y, dims.n_u
    stages = [StageLinearizations(
        A=[np.zeros((ny, ny)) for _ in range(dims.n_a + 1)],
        B=[np.zeros((ny, nu)) for _ in range(dims.n_b)],
        affine_term=np.zeros(ny)) for _ in range(dims.Np)]
    w = np.ones(dims.n) if weights is None else weights
    return JacobianView(w, dims, stages=stages)


def canonical_qr(M):
    """numpy thin QR normalized to a positive R diagonal."""
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s, (R.T * s).T


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def fig_view(rng):
    return random_view(rng, FIG_DIMS)
