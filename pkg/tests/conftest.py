import math

import numpy as np
import pytest

from dmriseg import GradientTable, Grid3, Volume

# Acceptance summary lines collected by tests/test_acceptance.py; printed
# in the terminal summary so they survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def hemisphere_directions(n):
    """n well-spread unit vectors on the upper hemisphere (Fibonacci lattice)."""
    i = np.arange(n)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    z = (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def single_shell_table(n_dirs, b=1000.0):
    """One b0 measurement followed by n_dirs directions at b."""
    dirs = hemisphere_directions(n_dirs)
    bvals = np.concatenate([[0.0], np.full(n_dirs, b)])
    alld = np.concatenate([[[0.0, 0.0, 0.0]], dirs], axis=0)
    return GradientTable.from_bvals(bvals, alld)


@pytest.fixture(scope="session")
def table90():
    return single_shell_table(90)


@pytest.fixture(scope="session")
def dirs90(table90):
    return table90.dirs[~table90.is_b0]


def constant_volume(dims, value, channels=1, spacing=(1.0, 1.0, 1.0)):
    grid = Grid3(dims, spacing)
    data = np.full(dims + (channels,), value, dtype=np.float32)
    return Volume(grid, data)


def random_volume(dims, channels=1, rng=None, low=0.0, high=1.0):
    rng = rng or np.random.default_rng(0)
    grid = Grid3(dims)
    data = rng.uniform(low, high, size=dims + (channels,)).astype(np.float32)
    return Volume(grid, data)
