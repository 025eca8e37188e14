import numpy as np
import pytest

from medsynth import tensor as T


def central_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f wrt array x (the oracle every
    analytic gradient is checked against)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_gradients(build_loss, params: list[T.Tensor], rtol: float = 1e-5, h: float = 1e-6):
    """Compare tape gradients of build_loss() against central differences."""
    with T.Tape() as tape:
        loss = build_loss()
        T.backward(tape, loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    for p, ana in zip(params, analytic):
        num = central_diff_grad(lambda: build_loss().item(), p.data, h=h)
        denom = np.maximum(1.0, np.abs(ana))
        err = np.abs(ana - num) / denom
        assert err.max() < rtol, f"grad mismatch: max rel err {err.max():.3e}"


@pytest.fixture
def rng():
    from medsynth.rng import Stream
    return Stream(20250810, "tests")
