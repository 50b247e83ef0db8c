import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-3):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > rtol * denom + atol
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} gradient entries off; worst "
        f"analytic={analytic[bad].ravel()[0]} numeric={numeric[bad].ravel()[0]}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
