import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aircombat.geometry import antenna_train_angle
from aircombat.policy_io import (
    GLOBAL_OBS_DIM, HEAD_SIZES, CommanderAction, DiscreteAction, PolicyKind, RewardBreakdown,
    build_commander_obs, build_escape_obs, build_fight_obs, build_global_obs, commander_reward,
    decode_action, escape_reward, escape_step_reward, fight_reward, is_favorable, kill_reward, obs_dim,
)
from aircombat.sim import AircraftKind, CombatEvent, EventKind, ManeuverCommand, ScenarioConfig, Team, advance, init_episode

from conftest import plane, world_of


def random_world(seed, n=2, m=2):
    rng = np.random.default_rng(seed)
    w = init_episode(ScenarioConfig.versus(n, m), seed)
    for _ in range(int(rng.integers(0, 40))):
        if w.done:
            break
        advance(w, {ac.id: ManeuverCommand(rng.uniform(0, 360), rng.uniform(100, 900), bool(rng.random() < .3))
                    for ac in w.aircraft if ac.alive})
    return w


def test_lengths():
    assert obs_dim(PolicyKind.FIGHT, AircraftKind.AC1) == 29
    assert obs_dim(PolicyKind.FIGHT, AircraftKind.AC2) == 27
    assert obs_dim(PolicyKind.ESCAPE, AircraftKind.AC1) == 29
    assert obs_dim(PolicyKind.ESCAPE, AircraftKind.AC2) == 28
    assert obs_dim(PolicyKind.COMMANDER) == 39


def test_fight_obs_1v1_ac2_zero_friend():
    w = world_of(plane(0, kind="AC2"), plane(1, "opponent", y=20))
    obs = build_fight_obs(w, 0, 1)
    assert len(obs) == 27
    assert np.all(obs.block(2) == 0)


def test_fight_obs_target_on_nose():
    w = world_of(plane(0, x=15, y=15, heading=0), plane(1, "opponent", x=15, y=20))
    obs = build_fight_obs(w, 0, 1)
    assert obs.block(0)[6] == 0.0  # own ATA to target


def test_fight_obs_dead_target_raises():
    w = world_of(plane(0), plane(1, "opponent", y=20, alive=False))
    with pytest.raises(ValueError):
        build_fight_obs(w, 0, 1)


def test_escape_obs_zero_fill_second_opponent():
    w = world_of(plane(0), plane(1, "agent", x=10), plane(2, "opponent", y=20), plane(3, "opponent", y=22, alive=False))
    obs = build_escape_obs(w, 0)
    assert len(obs) == 29
    assert np.any(obs.block(1) != 0) and np.all(obs.block(2) == 0)
    w.get(0).spec  # AC1
    w2 = world_of(plane(0, kind="AC2"), plane(1, "agent", x=10), plane(2, "opponent", y=20), plane(3, "opponent", y=22))
    assert len(build_escape_obs(w2, 0)) == 28


def test_commander_obs_zero_fill():
    w = world_of(plane(0), plane(1, x=10), plane(2, x=20, kind="AC2"),
                 plane(3, "opponent", y=20), plane(4, "opponent", y=22, alive=False), plane(5, "opponent", y=24, alive=False))
    obs = build_commander_obs(w, 0)
    assert len(obs) == 39
    assert np.all(obs.block(2) == 0) and np.all(obs.block(3) == 0)
    assert np.all(obs.block(4) != 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 5))
def test_observations_normalized(seed, n, m):
    w = random_world(seed, n, m)
    for ac in w.team(Team.AGENT):
        enemies = w.enemies_of(ac.id)
        if not enemies:
            continue
        for obs in (build_fight_obs(w, ac.id, enemies[0].id), build_escape_obs(w, ac.id), build_commander_obs(w, ac.id)):
            assert np.all((obs.features >= 0) & (obs.features <= 1))
        g = build_global_obs(w, ac.id)
        assert g.shape == (GLOBAL_OBS_DIM,)
        assert np.all((g >= 0) & (g <= 1))


@pytest.mark.parametrize("heading, h, expected", [(100, 2, 70), (0, -6, 90), (10, 1, 355)])
def test_decode_heading(heading, h, expected):
    cmd = decode_action(DiscreteAction(h, 0), plane(0, heading=heading))
    assert cmd.target_heading == pytest.approx(expected)


@pytest.mark.parametrize("idx, speed", [(8, 900), (0, 100), (4, 500)])
def test_decode_speed_ac1(idx, speed):
    assert decode_action(DiscreteAction(0, idx), plane(0)).target_speed == speed


def test_decode_rocket_on_ac2_raises():
    with pytest.raises(ValueError):
        decode_action(DiscreteAction(0, 0, 0, 1), plane(0, kind="AC2"))


def test_decode_total_over_grid():
    ac = plane(0, heading=123)
    for heads in itertools.product(*(range(n) for n in HEAD_SIZES[AircraftKind.AC1])):
        a = DiscreteAction.from_heads(heads)
        cmd = decode_action(a, ac)
        assert 0 <= cmd.target_heading < 360 and 100 <= cmd.target_speed <= 900
        assert a.to_heads(AircraftKind.AC1) == heads


@pytest.mark.parametrize("bad", [(7, 0), (0, 9), (0, 0, 2)])
def test_discrete_action_validation(bad):
    with pytest.raises(ValueError):
        DiscreteAction(*bad)


def test_commander_action_validation():
    assert CommanderAction(0).is_escape and not CommanderAction(3).is_escape
    with pytest.raises(ValueError):
        CommanderAction(4)


def test_kill_reward_example():
    assert kill_reward(180, 205, 150) == pytest.approx(1 + 55 / 205)


def test_fight_reward_kill_uses_victim_ata():
    w = world_of(plane(0, heading=0, cannon=150, rockets=5), plane(1, "opponent", y=16, heading=90, alive=False))
    w.get(0).cannon_init = 200
    ev = [CombatEvent(EventKind.KILL, 0, 1, 0)]
    ata = antenna_train_angle(w.get(1).pose, w.get(0).position)
    r = fight_reward(w, 0, ev)
    assert r.kill_term == pytest.approx(ata / 180 + 50 / 205)
    assert r.total == r.kill_term


def test_fight_reward_penalties_and_none():
    w = world_of(plane(0), plane(1, "opponent", y=20))
    assert fight_reward(w, 0, []).total == 0
    assert fight_reward(w, 0, [CombatEvent(EventKind.OUT_OF_BOUNDS, None, 0, 3)]).total == -5
    assert fight_reward(w, 0, [CombatEvent(EventKind.FRIENDLY_KILL, 0, 5, 3)]).total == -2
    # another aircraft's penalties are not ours
    assert fight_reward(w, 0, [CombatEvent(EventKind.OUT_OF_BOUNDS, None, 1, 3)]).total == 0


@pytest.mark.parametrize("d, expected", [(5.9, -0.01), (6.0, 0.0), (9, 0.0), (13.0, 0.0), (13.1, 0.01)])
def test_escape_branches(d, expected):
    assert escape_step_reward(d) == expected
    w = world_of(plane(0, x=10, y=10), plane(1, "opponent", x=10, y=10 + d))
    assert escape_reward(w, 0, []).escape_term == expected


def test_escape_reward_stops_at_death():
    w = world_of(plane(0, x=-1, y=10, alive=False), plane(1, "opponent", x=10, y=12))
    r = escape_reward(w, 0, [CombatEvent(EventKind.OUT_OF_BOUNDS, None, 0, 0)])
    assert (r.escape_term, r.boundary_term) == (0.0, -5.0)


@pytest.mark.parametrize("d_ok, ata_ok, aa_ok, act_ok", list(itertools.product([True, False], repeat=4)))
def test_favorable_truth_table(d_ok, ata_ok, aa_ok, act_ok):
    d = 4.0 if d_ok else 5.0
    ata = 20.0 if ata_ok else 30.0
    aa = 40.0 if aa_ok else 50.0
    action = 2 if act_ok else 0
    assert is_favorable(d, ata, aa, action) is (d_ok and ata_ok and aa_ok and act_ok)


def _favorable_world():
    # agent 4 km behind the target, both heading north
    return world_of(plane(0, x=15, y=10, heading=0), plane(1, "opponent", x=15, y=14, heading=0))


def test_commander_reward_bonus():
    w = _favorable_world()
    assert commander_reward(w, 0, CommanderAction(2), [], 1, w).commander_favorable_term == 0.1
    assert commander_reward(w, 0, CommanderAction(0), [], 1, w).total == 0
    assert commander_reward(w, 0, CommanderAction(2), []).total == 0  # not a decision step


def test_commander_reward_kills_deaths_boundary():
    w = _favorable_world()
    assert commander_reward(w, 0, CommanderAction(1), [CombatEvent(EventKind.KILL, 0, 1, 0)]).total == 1
    assert commander_reward(w, 0, CommanderAction(1), [CombatEvent(EventKind.KILL, 1, 0, 0)]).total == -1
    assert commander_reward(w, 0, CommanderAction(1), [CombatEvent(EventKind.OUT_OF_BOUNDS, None, 0, 0)]).total == -5


def test_breakdown_total_is_sum():
    r = RewardBreakdown(1.0, 0.01, -5.0, -2.0, 1.0, 0.1)
    assert r.total == 1.0 + 0.01 - 5.0 - 2.0 + 1.0 + 0.1


def test_global_obs_masks_dead_and_self_action():
    w = world_of(plane(0), plane(1, x=10), plane(2, "opponent", y=20), plane(3, "opponent", y=22, alive=False))
    g = build_global_obs(w, 1, {0: DiscreteAction(3, 4, 1, 0), 1: DiscreteAction(6, 8, 1, 1)})
    mask = g[-10:]
    assert list(mask) == [1, 1, 0, 0, 0, 1, 0, 0, 0, 0]
    slots = g[:-10].reshape(10, 11)
    assert np.all(slots[0, 7:] == 0)  # own action never shown
    assert slots[1, 7:].tolist() == [0.75, 0.5, 1.0, 0.0]  # teammate 0
    assert np.all(slots[6] == 0)
