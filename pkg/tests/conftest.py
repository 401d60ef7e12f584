import numpy as np
import pytest

from dropout_gp import NetworkSpec, init_iid_gaussian


@pytest.fixture
def tiny_spec():
    return NetworkSpec(3, (4, 4), 2, activation="tanh", keep_rate=0.8)


@pytest.fixture
def tiny_net(tiny_spec):
    return init_iid_gaussian(tiny_spec, 11)


@pytest.fixture
def tiny_input():
    return np.array([0.3, -0.7, 0.5])


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
