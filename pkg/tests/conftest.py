import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def gaussian_data(n, p, V=None, rng=None, mu=None):
    """Gaussian sample with scatter V (identity by default)."""
    rng = rng or np.random.default_rng(0)
    V = np.eye(p) if V is None else np.asarray(V, dtype=float)
    L = np.linalg.cholesky(V)
    X = rng.standard_normal((n, p)) @ L.T
    if mu is not None:
        X = X + mu
    return X
