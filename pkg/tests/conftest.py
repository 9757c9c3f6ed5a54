import numpy as np
import pytest

from fusedpoisson.data import CalendarDims, synth_panel
from fusedpoisson.graph import ProximityGraph
from fusedpoisson.model import ParamState


def random_truth(S, dims, rng, base=1.0, sd=0.3, sparsity=0.5):
    truth = ParamState.zeros(S, dims)
    truth.theta[:] = rng.normal(base, sd, S)
    truth.hod_shared[:] = rng.normal(0, sd, dims.hod_free)
    truth.dow_shared[:] = rng.normal(0, sd, dims.dow_free)
    truth.hod_int[1:] = rng.normal(0, sd, (S - 1, dims.hod_free)) * (rng.random((S - 1, dims.hod_free)) < sparsity)
    truth.dow_int[1:] = rng.normal(0, sd, (S - 1, dims.dow_free)) * (rng.random((S - 1, dims.dow_free)) < sparsity)
    return truth


def random_graph(S, rng, p=0.5):
    edges = [(i, j) for i in range(S) for j in range(i + 1, S) if rng.random() < p]
    return ProximityGraph.from_edges(S, edges)


def path_graph(S):
    return ProximityGraph.from_edges(S, [(i, i + 1) for i in range(S - 1)])


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(7)
    dims = CalendarDims(4, 3)
    truth = random_truth(4, dims, rng)
    panel = synth_panel(truth, 30, seed=7, dims=dims)
    graph = ProximityGraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
    return panel, graph, truth


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
