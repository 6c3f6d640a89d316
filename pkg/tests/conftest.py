import numpy as np
import pytest

from diffclip.tensor import Tape, Tensor, set_nan_check

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _nan_check():
    set_nan_check(True)
    yield
    set_nan_check(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of each array (in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build, leaves, h=1e-5):
    """Analytic (tape) vs. numeric gradients of scalar ``build()`` for Tensor ``leaves``.

    Returns the worst relative error over leaves.
    """
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in leaves]

    def value():
        return float(build().data)

    numeric = numeric_grad(value, [t.data for t in leaves], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
