import numpy as np
import pytest

from nsrobust.network import RELU, Model, dense


@pytest.fixture
def hand_net():
    """2 -> 2 -> 1 net, W1 rows (1, 0) and (0, -1), ReLU, W2 = (2, 3), no biases."""
    layers = [dense(2, 2, bias=False), RELU, dense(2, 1, bias=False)]
    params = {"0.weight": np.array([[1.0, 0.0], [0.0, -1.0]]), "2.weight": np.array([[2.0, 3.0]])}
    return Model(layers, params, (2,), 1)


@pytest.fixture
def linear_net():
    """Single dense layer 3 -> 2 with bias, f64."""
    params = {"0.weight": np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 3.0]]), "0.bias": np.array([0.1, -0.2])}
    return Model([dense(3, 2)], params, (3,), 2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
