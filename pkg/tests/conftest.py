import numpy as np
import pytest
import torch

from graphlang.graph import Graph, karate_club, path_graph


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def triangle():
    return Graph.from_edges([(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def karate():
    return karate_club()


@pytest.fixture
def path3():
    return path_graph(3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record a criterion verdict; printed as one line in the terminal summary."""

    def record(number, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
