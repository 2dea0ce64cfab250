import numpy as np
import pytest
import torch

from aircombat.geometry import Pose2D
from aircombat.sim import AC1, AC2, AircraftState, Team, WorldState

torch.set_num_threads(1)


def plane(id, team="agent", kind="AC1", x=15.0, y=15.0, heading=0.0, speed=500.0,
          cannon=200, rockets=None, alive=True):
    spec = AC1 if kind == "AC1" else AC2
    if rockets is None:
        rockets = 5 if spec.has_rockets else 0
    return AircraftState(
        id=id, team=Team(team), spec=spec, pose=Pose2D(x, y, heading), speed=speed,
        cannon_remaining=cannon, rockets_remaining=rockets, cannon_init=cannon, rockets_init=rockets,
        alive=alive,
    )


def world_of(*aircraft, map_size=30.0, horizon=200, seed=0):
    return WorldState(list(aircraft), map_size, horizon, np.random.default_rng(seed))


@pytest.fixture
def duel():
    """AC1 agent at the centre looking north at an AC1 opponent 1.5 km ahead."""
    return world_of(plane(0, "agent", x=15, y=15, heading=0), plane(1, "opponent", x=15, y=16.5, heading=0))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def report_criterion(name, passed, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
