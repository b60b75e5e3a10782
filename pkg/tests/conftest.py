import numpy as np
import pytest

E1 = np.exp(-1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def sym2():
    """The symmetric 2x2 instance with a closed-form optimum."""
    a = np.array([0.5, 0.5])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    return a, a.copy(), C


P11_STAR = 0.5 / (1.0 + E1)


def random_plan(rng, n, m, low=0.05):
    P = rng.uniform(low, 1.0, size=(n, m))
    return P / P.sum()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
