import numpy as np
import pytest
from scipy.stats import chisquare

from aircombat.geometry import antenna_train_angle
from aircombat.scripts import (
    ESCAPE_STEPS, ScriptState, pursuit_speed, random_action, random_policy, script_policy, static_policy,
)
from aircombat.sim import ManeuverCommand, advance

from conftest import plane, world_of


class NeverEscape:
    def random(self):
        return 1.0


class AlwaysEscape:
    def random(self):
        return 0.0


def test_static_holds_heading_at_min_speed():
    ac = plane(0, heading=77)
    cmd = static_policy(ac)
    assert (cmd.target_heading, cmd.target_speed, cmd.fire_cannon, cmd.fire_rocket) == (77, 100, False, False)


def test_static_flight_and_ammo():
    w = world_of(plane(0, x=15, y=15, heading=90, speed=100), plane(1, "opponent", x=5, y=5))
    for _ in range(10):
        advance(w, {i: static_policy(w.get(i)) for i in (0, 1)})
    assert w.get(0).pose.x == pytest.approx(15 + 10 * 100 * 1.852 / 3600)
    assert w.get(0).cannon_remaining == 200 and w.get(0).rockets_remaining == 5


def test_random_policy_reproducible():
    ac = plane(0)
    a = [random_policy(ac, np.random.default_rng(4)) for _ in range(3)]
    b = [random_policy(ac, np.random.default_rng(4)) for _ in range(3)]
    assert a == b


def test_random_heading_uniform_and_ac2_no_rocket():
    rng = np.random.default_rng(0)
    ac2 = plane(0, kind="AC2")
    counts = np.zeros(13)
    for _ in range(100_000):
        a = random_action(ac2, rng)
        counts[a.heading_idx + 6] += 1
        assert a.rocket == 0
    assert chisquare(counts).pvalue > 0.001


def test_pursuit_fires_on_target_in_wez():
    w = world_of(plane(0, "opponent", heading=0), plane(1, "agent", y=16.5))
    cmd, state = script_policy(w, 0, ScriptState(NeverEscape()))
    assert cmd.fire_cannon and cmd.fire_rocket
    assert state.mode == "pursue"


def test_pursuit_heads_along_line_of_sight():
    w = world_of(plane(0, "opponent", x=10, y=10, heading=0), plane(1, "agent", x=20, y=20))
    cmd, _ = script_policy(w, 0, ScriptState(NeverEscape()))
    assert cmd.target_heading == pytest.approx(45)
    assert not cmd.fire_cannon


def test_escape_is_reciprocal_and_lasts_twenty():
    w = world_of(plane(0, "opponent", x=10, y=10, heading=0), plane(1, "agent", x=20, y=10))
    state = ScriptState(AlwaysEscape())
    cmd, state = script_policy(w, 0, state)
    assert cmd.target_heading == pytest.approx(270) and cmd.target_speed == 900
    escaping = 1
    state.rng = NeverEscape()
    while state.mode == "escape":
        cmd, state = script_policy(w, 0, state)
        escaping += 1
    assert escaping == ESCAPE_STEPS


def test_no_enemy_holds_heading():
    w = world_of(plane(0, "opponent", heading=33), plane(1, "agent", alive=False))
    cmd, _ = script_policy(w, 0, ScriptState(NeverEscape()))
    assert cmd.target_heading == 33


def test_script_state_invariant():
    with pytest.raises(ValueError):
        ScriptState(None, "escape", 0)
    with pytest.raises(ValueError):
        ScriptState(None, "pursue", 3)


def test_pursuit_speed_law():
    ac = plane(0, kind="AC2")
    assert pursuit_speed(ac, 6) == 600
    assert pursuit_speed(ac, 2.5) == pytest.approx(350)


def test_pursuit_converges_on_static_target():
    w = world_of(plane(0, "opponent", x=40, y=40, heading=180, speed=900), plane(1, "agent", x=60, y=60, heading=90),
                 map_size=100)
    state = ScriptState(NeverEscape())
    atas = []
    for _ in range(80):
        cmd, state = script_policy(w, 0, state)
        cmd = ManeuverCommand(cmd.target_heading, cmd.target_speed)
        advance(w, {0: cmd, 1: static_policy(w.get(1))})
        atas.append(antenna_train_angle(w.get(0).pose, w.get(1).position))
    first_small = next(i for i, a in enumerate(atas) if a < 5)
    tail = atas[first_small:first_small + 20]
    assert all(b <= a + 1e-9 or b < 1.0 for a, b in zip(tail, tail[1:]))
    assert tail[-1] < 1.0
