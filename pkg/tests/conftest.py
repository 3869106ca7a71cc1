from __future__ import annotations

import numpy as np
import pytest

from stitchrl.data import Dataset, Outcome, Trajectory
from stitchrl.env import BehaviorPolicy, EnvSpec, collect_dataset, sample_env


def make_traj(tid, states, actions, rewards, outcome=Outcome.TRUNCATED, **kw):
    return Trajectory(tid, np.asarray(states, dtype=float), actions, rewards, outcome, **kw)


@pytest.fixture(scope="session")
def small_env():
    return sample_env(EnvSpec(seed=7))


@pytest.fixture(scope="session")
def small_ds(small_env):
    return collect_dataset(small_env, BehaviorPolicy(small_env, 0.3), 200, seed=3)


@pytest.fixture
def toy_ds():
    rng = np.random.default_rng(0)
    trajs = [make_traj(f"t{i}", rng.normal(size=(6, 3)), rng.integers(4, size=6), rng.normal(size=6))
             for i in range(12)]
    return Dataset(trajs, "toy", 3, 4)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
