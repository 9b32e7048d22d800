import sys

import numpy as np
import pytest
import torch

from mtda.data import DomainDataset


@pytest.fixture
def deterministic(monkeypatch):
    """64-bit deterministic mode for oracle and equivalence checks."""
    monkeypatch.setenv("MTDA_DETERMINISTIC", "1")
    yield
    torch.use_deterministic_algorithms(False)


def make_dataset(n=20, shape=(8, 8, 3), num_classes=10, seed=0, role="source", domain_id="toy"):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, *shape)).astype(np.float32)
    y = rng.integers(0, num_classes, size=n)
    return DomainDataset(x, y, domain_id, num_classes, role)


@pytest.fixture
def toy_source():
    return make_dataset(24, seed=1, domain_id="src")


@pytest.fixture
def toy_targets():
    return [make_dataset(n, seed=10 + i, role="target", domain_id=f"t{i}") for i, n in enumerate((10, 13))]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
