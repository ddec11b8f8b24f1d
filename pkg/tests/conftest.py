import numpy as np
import pytest

from intnet.toynets import linear_net, residual_net, vrcnn_net

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_nets():
    rng = np.random.default_rng(7)
    return {
        "linear": linear_net(rng, size=16),
        "residual": residual_net(rng, size=16),
        "concat": vrcnn_net(rng, size=16),
    }
