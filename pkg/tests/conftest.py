import numpy as np
import pytest

from hyperspec.graph import Graph, Node


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relabel(graph: Graph, perm_seed: int) -> Graph:
    """Same graph with shuffled node ids (changes the topological order chosen)."""
    rng = np.random.default_rng(perm_seed)
    ids = list(graph.nodes)
    new = dict(zip(ids, (int(v) for v in rng.permutation(len(ids)) + 100)))
    nodes = {new[i]: Node(n.op, tuple(new[p] for p in n.preds)) for i, n in graph.nodes.items()}
    return Graph(nodes, new[graph.input], new[graph.sink])


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
