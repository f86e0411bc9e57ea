import numpy as np
import pytest

from sgmnet.matching import GmmConfig, GraphMatching
from sgmnet.scene_graph import GcmConfig, GraphConstruction, SceneGraph
from sgmnet.tensor import Tensor

TINY_GCM = GcmConfig(channels=6, grid=(2, 2), node_dim=5, edge_dim=3, hidden=7)
TINY_GMM = GmmConfig(node_dim=5, edge_dim=3, prop_hidden=8, prop_out=6, update_dim=4)


def random_graph(rng, M=4, node_dim=5, edge_dim=3, scale=1.0, grad=False):
    return SceneGraph(Tensor(rng.standard_normal((M, node_dim)) * scale, requires_grad=grad),
                      Tensor(rng.standard_normal((M, M, edge_dim)) * scale, requires_grad=grad))


@pytest.fixture
def tiny_gmm():
    return GraphMatching(np.random.default_rng(7), TINY_GMM)


@pytest.fixture
def tiny_gcm():
    return GraphConstruction(np.random.default_rng(8), TINY_GCM).eval()


# acceptance verdicts, repeated at the end of the run so they survive output capture
ACCEPT_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPT_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPT_LINES:
            terminalreporter.write_line(line)
