import numpy as np
import pytest

from hybridse.tensor import Tape, Tensor, finite_difference_grad


@pytest.fixture(autouse=True)
def _debug_checks():
    from hybridse import tensor

    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


def tape_gradient(f, x: np.ndarray) -> np.ndarray:
    """Gradient of scalar-valued ``f`` w.r.t. a leaf holding ``x``."""
    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    grads = tape.backward(y)
    g = grads.get(xt.node)
    return np.zeros(xt.shape) if g is None else g.data


def assert_grad_matches(f, x: np.ndarray, eps: float = 1e-4):
    """Backward vs central differences: rel err < 1e-4, or abs < 1e-6 where
    the gradient magnitude is below 1e-2."""
    ana = tape_gradient(f, x)
    fd = finite_difference_grad(lambda t: f(t), Tensor(x), eps=eps).data
    big = np.abs(fd) >= 1e-2
    if np.any(big):
        rel = np.abs(ana[big] - fd[big]) / np.abs(fd[big])
        assert rel.max() < 1e-4, f"max rel err {rel.max():.3e}"
    small = ~big
    if np.any(small):
        err = np.abs(ana[small] - fd[small])
        assert err.max() < 1e-6, f"max abs err {err.max():.3e}"
