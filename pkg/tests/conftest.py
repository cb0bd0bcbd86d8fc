import numpy as np
import pytest

from fgnn.layers import DenseLayer, FgnDenseLayer, Network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fgn_net():
    """Three FGN layers on 5-d inputs with moderately wide variances."""
    layers = [FgnDenseLayer(5, 8, "tanh", sigma0=3.0, seed=1),
              FgnDenseLayer(8, 6, "relu", sigma0=2.0, seed=2),
              FgnDenseLayer(6, 3, "identity", sigma0=2.0, seed=3)]
    return Network(layers, (5,))


@pytest.fixture
def classic_net():
    layers = [DenseLayer(5, 8, "tanh", seed=1), DenseLayer(8, 6, "relu", seed=2),
              DenseLayer(6, 3, "identity", seed=3)]
    return Network(layers, (5,))


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))))


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records and prints one PASS/FAIL line for criterion ``n``."""
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def mnist_run():
    """The desk-scale MNIST pipeline (classical, converted, retrained, long-retrained).

    Takes a couple of minutes on one core; shared by every test that needs it.
    """
    from fgnn.experiments import mnist_run as run
    return run()
