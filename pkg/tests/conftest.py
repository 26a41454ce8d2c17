import numpy as np
import pytest

from ge_lab import symplectic as sp


def random_valid_cov(m, rng, lam_max=3.0, r_scale=0.6, pure=False):
    """Random physical covariance V = S^{-1} diag(lam I2) S^{-T}."""
    S = sp.random_symplectic(m, rng, r_scale=r_scale)
    if pure:
        lam = np.ones(m)
    else:
        lam = 1.0 + rng.uniform(0.0, lam_max - 1.0, size=m)
    D = np.repeat(lam, 2)
    Sinv = np.linalg.inv(S)
    V = Sinv * D @ Sinv.T
    return (V + V.T) / 2


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
