import numpy as np
import pytest

from madnn.channel import Scenario


def random_path_set(rng, k, lt, lr):
    from madnn.channel import PathSet
    kt = rng.uniform(-60, 60, (k, lt, 2))
    kr = rng.uniform(-60, 60, (k, lr, 3))
    prm = (rng.standard_normal((k, lt, lr)) + 1j * rng.standard_normal((k, lt, lr))) / 2
    users = rng.uniform(0, 100, (k, 3))
    return PathSet(kt, kr, prm, users)


@pytest.fixture
def desk():
    return Scenario(rng_seed=7)


@pytest.fixture
def tiny():
    """Small geometry used for fast end-to-end tests: G = 8, M = 4, N = 2, K = 2."""
    return Scenario(num_mas=2, region_size=(0.075, 0.025), rng_seed=3)


# PASS/FAIL lines collected by the acceptance suite
ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
