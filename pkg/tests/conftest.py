import numpy as np
import pytest

from sgdd.graph import SbmSpec, build_graph, sbm_generate


def random_graph(rng, n, density=0.4, d=3, classes=2):
    upper = np.triu(rng.random((n, n)) < density, k=1)
    edges = list(zip(*np.nonzero(upper)))
    labels = np.arange(n) % classes
    masks = [np.ones(n, bool), np.zeros(n, bool), np.zeros(n, bool)]
    return build_graph(edges, rng.standard_normal((n, d)), labels, masks, num_classes=classes)


def sym_psd(rng, n, rank=None):
    a = rng.standard_normal((n, rank or n))
    return a @ a.T


@pytest.fixture(scope="session")
def sbm7():
    return sbm_generate(SbmSpec(100, 5, 0.8, 0.1, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
