import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from margex.dataset import Dataset
from margex.model import CorrelationKind
from margex.verify import random_cluster

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(kind, m, rng, sizes=(2, 6), p=2):
    kind = CorrelationKind.parse(kind)
    clusters = [random_cluster(kind, int(rng.integers(sizes[0], sizes[1] + 1)), p, rng) for _ in range(m)]
    return Dataset.from_clusters(clusters)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
