import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

TOY_SESSIONS = [
    [0, 1, 2, 3],
    [2, 4, 3],
    [1, 2, 1, 5],
    [5, 0, 4],
    [3, 2, 4, 0, 1],
    [4, 5],
]


@pytest.fixture
def toy_sessions():
    return [list(s) for s in TOY_SESSIONS]


@pytest.fixture
def toy_graph(toy_sessions):
    from tiedgnn.graphs import build_global_graph

    return build_global_graph(toy_sessions, epsilon=2, max_neighbors=3, num_items=6)


@pytest.fixture
def small_config():
    from tiedgnn.config import TrainConfig

    return TrainConfig(d=8, K=2, L=2, epsilon=2, max_neighbors=3, max_len=10, dropout=0.0, batch_size=4)


def numpy_params(model):
    return {k: v.data for k, v in model.params.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted_small():
    """A small planted corpus with its bundle and graph, shared across tests."""
    from tiedgnn.graphs import build_global_graph
    from tiedgnn.synthetic import planted_splits
    from tiedgnn.training import bundle_from_splits

    splits = planted_splits(n_sessions=150, seed=0)
    bundle = bundle_from_splits(splits)
    graph = build_global_graph(bundle.train_sessions, epsilon=2, max_neighbors=4, num_items=bundle.vocab.size)
    return bundle, graph
