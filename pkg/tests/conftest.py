import numpy as np
import pytest

from sigmetric.signal_io import load_manifest
from sigmetric.synthetic import make_synthetic_dataset, synthetic_protocol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """5 classes x 6 samples, 2 groups x 32 steps; last 2 classes unseen."""
    root = tmp_path_factory.mktemp("small")
    path, classes = make_synthetic_dataset(root, n_classes=5, per_class=6, n_groups=2,
                                           length=32, seed=3)
    return load_manifest(path), synthetic_protocol(classes, 2), path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
