import numpy as np
import pytest

from gclab.graph import Graph


def random_graph(rng, n, p=0.4, feat_dim=3):
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1), rng.standard_normal((n, feat_dim)))


def path_graph(n, feat_dim=1):
    idx = np.arange(n - 1)
    return Graph(n, np.stack([idx, idx + 1], axis=1), np.ones((n, feat_dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
