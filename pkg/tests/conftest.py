import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cosam.graph import InteractionGraph  # noqa: E402


def random_graph(rng, n, m, density=0.4, connected_nodes=True):
    """Random bipartite graph; with ``connected_nodes`` no node is isolated."""
    mask = rng.random((n, m)) < density
    if connected_nodes:
        for u in range(n):
            if not mask[u].any():
                mask[u, rng.integers(m)] = True
        for i in range(m):
            if not mask[:, i].any():
                mask[rng.integers(n), i] = True
    elif not mask.any():
        mask[0, 0] = True
    u, i = np.nonzero(mask)
    return InteractionGraph(n, m, np.stack([u, i], axis=1))


@pytest.fixture
def toy_graph():
    # u0-i0, u0-i1, u1-i1
    return InteractionGraph(2, 2, [(0, 0), (0, 1), (1, 1)])


@pytest.fixture
def small_graph():
    rng = np.random.default_rng(7)
    return random_graph(rng, 4, 5, 0.45)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
