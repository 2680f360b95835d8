import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from biasmrp.frame import AdjacencyGraph, Attribute, Schema

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def path_graph(n, islands=()):
    """Chain over the non-island nodes plus isolated ``islands``."""
    nodes = [i for i in range(n) if i not in islands]
    edges = list(zip(nodes[:-1], nodes[1:]))
    return AdjacencyGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2))


def grid_graph(rows, cols):
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    return AdjacencyGraph(rows * cols, np.array(edges, dtype=np.int64))


@pytest.fixture
def small_schema():
    return Schema(
        attributes=(Attribute("area", 6), Attribute("sex", 2, labels=("M", "F")),
                    Attribute("age", 4, ordinal=True)),
        choices=("a", "b", "c"), area="area", time=None, state_covariates=("z",))


@pytest.fixture
def rng():
    return np.random.default_rng(20231018)


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """``criterion(k, passed, detail)`` records one acceptance result line."""
    def record(k, passed, detail):
        line = f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[k] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
