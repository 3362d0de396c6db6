"""Shared fixtures. Simulated worlds and runs are cached per session."""

from __future__ import annotations

import numpy as np
import pytest

from framemerge.sim.lidar import ScanConfig, simulate_run
from framemerge.sim.world import WorldSpec, generate_world

# A short T-shaped tunnel with a side branch, small enough for unit tests.
SMALL_NODES = [(0, 0), (40, 0), (40, 30), (80, 0)]
SMALL_EDGES = [(0, 1, 5, 4), (1, 2, 4, 3.5), (1, 3, 6, 5)]


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldSpec(SMALL_NODES, SMALL_EDGES, roughness=0.2, seed=3))


@pytest.fixture(scope="session")
def small_run(small_world):
    return simulate_run(small_world, [(5, 0, 1.2), (40, 0, 1.2), (40, 25, 1.2)], ScanConfig(seed=1))


@pytest.fixture(scope="session")
def noiseless_run(small_world):
    return simulate_run(small_world, [(5, 0, 1.2), (40, 0, 1.2), (40, 25, 1.2)], ScanConfig(noise_sigma=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def crossing_runs(small_world):
    """Two runs sharing the west corridor in opposite directions, sensors 30 / 20 deg."""
    a = simulate_run(small_world, [(5, 0, 1.5), (40, 0, 1.5), (40, 25, 1.5)], ScanConfig(seed=4))
    b = simulate_run(small_world, [(75, 0, 0.8), (40, 0, 0.8), (8, 0, 0.8)], ScanConfig(vertical_fov=20.0, seed=5))
    return a, b


# Acceptance verdicts, one line per criterion, repeated in the terminal summary.
ACCEPTANCE: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
