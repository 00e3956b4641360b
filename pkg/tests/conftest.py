import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from rapa.numcore import SeededRng
from rapa.synthetic import write_synthetic_cifar10


@pytest.fixture
def rng():
    return SeededRng(20260810)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """Tiny synthetic CIFAR-10-format dataset for loader/CLI tests."""
    path = tmp_path_factory.mktemp("cifar-small")
    return write_synthetic_cifar10(str(path), n_train=120, n_test=40, seed=11)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one line per acceptance criterion after the run."""
    try:
        from test_acceptance import RESULTS
    except Exception:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        status, desc, elapsed = RESULTS[num]
        terminalreporter.write_line(f"[{status}] criterion {num:2d} ({elapsed:7.2f}s): {desc}")
