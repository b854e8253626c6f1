import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from connbench.dataio import GeneratorConfig, generate_synthetic

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_connected_graph(rng, n, p=0.4):
    """Random weighted graph with a ring backbone so it is always connected."""
    w = rng.uniform(0.2, 2.0, size=(n, n)) * (rng.random((n, n)) < p)
    w = np.triu(w, 1)
    for i in range(n):
        j = (i + 1) % n
        w[min(i, j), max(i, j)] = max(w[min(i, j), max(i, j)], rng.uniform(0.2, 2.0))
    return w + w.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return generate_synthetic(GeneratorConfig(n_subjects=40, n_families=20, n_regions=8,
                                                  n_timepoints=48, modality="task_wm", seed=5).resolved())


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
