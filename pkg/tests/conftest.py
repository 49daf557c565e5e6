import time

import numpy as np
import pytest

from drkit.attacks import AttackConfig
from drkit.cli import demo_subset, load_pins
from drkit.harness import transfer_eval
from drkit.models import Model, load_bundled

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pins():
    return load_pins()


@pytest.fixture(scope="session")
def pinned_subset(pins):
    return demo_subset(pins)


@pytest.fixture(scope="session")
def vgg():
    return load_bundled("minivgg-digits")


@pytest.fixture(scope="session")
def resnet():
    return load_bundled("miniresnet-digits")


@pytest.fixture(scope="session")
def parity():
    return load_bundled("minivgg-parity")


@pytest.fixture(scope="session")
def pinned_dr(vgg, resnet, parity, pinned_subset, pins):
    """DR at MiniVGG's mid layer on the pinned subset, scored on all three models."""
    start = time.perf_counter()
    report = transfer_eval(vgg, [vgg, resnet, parity], "dr", AttackConfig(seed=pins["seed"]), pinned_subset)
    report.elapsed = time.perf_counter() - start
    return report


@pytest.fixture()
def tiny():
    """An untrained, frozen MiniVGG; cheap enough for per-test use."""
    return Model("minivgg", seed=3).freeze()


@pytest.fixture()
def digits_batch():
    rng = np.random.default_rng(11)
    x = np.zeros((4, 1, 28, 28), dtype=np.float32)
    x[:, :, 6:22, 10:18] = rng.uniform(0.6, 1.0, size=(4, 1, 16, 8))
    return x, np.array([1, 4, 7, 9])
