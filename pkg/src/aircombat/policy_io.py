"""
Observation encoding, action decoding and reward terms for the fight,
escape and commander policies.

Every observation feature is scaled into [0, 1]: positions by the map
size, speeds by the observed aircraft's top speed, headings by 360,
relative angles by 180 and distances by the map diagonal.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import angle_off, antenna_train_angle, aspect_angle, distance, wrap_angle
from .sim import AircraftKind, AircraftState, CombatEvent, EventKind, ManeuverCommand, WorldState


class PolicyKind(str, Enum):
    FIGHT = "fight"
    ESCAPE = "escape"
    COMMANDER = "commander"


# block widths per (policy, aircraft kind)
FIGHT_AGENT_LEN = {AircraftKind.AC1: 12, AircraftKind.AC2: 10}
FIGHT_OPP_LEN = 9
FIGHT_FRIEND_LEN = 8
ESCAPE_AGENT_LEN = {AircraftKind.AC1: 6, AircraftKind.AC2: 5}
ESCAPE_OPP_LEN = 8
ESCAPE_FRIEND_LEN = 7
COMMANDER_AGENT_LEN = 4
COMMANDER_OPP_LEN = 9
COMMANDER_FRIEND_LEN = 4
COMMANDER_N_OPP = 3
COMMANDER_N_FRIEND = 2


def block_sizes(policy: PolicyKind, kind: Optional[AircraftKind] = None) -> Tuple[int, ...]:
    policy = PolicyKind(policy)
    if policy is PolicyKind.FIGHT:
        return (FIGHT_AGENT_LEN[AircraftKind(kind)], FIGHT_OPP_LEN, FIGHT_FRIEND_LEN)
    if policy is PolicyKind.ESCAPE:
        return (ESCAPE_AGENT_LEN[AircraftKind(kind)], ESCAPE_OPP_LEN, ESCAPE_OPP_LEN, ESCAPE_FRIEND_LEN)
    return (COMMANDER_AGENT_LEN,) + (COMMANDER_OPP_LEN,) * COMMANDER_N_OPP + (COMMANDER_FRIEND_LEN,) * COMMANDER_N_FRIEND


def obs_dim(policy: PolicyKind, kind: Optional[AircraftKind] = None) -> int:
    return sum(block_sizes(policy, kind))


def _slices(sizes: Sequence[int]) -> Tuple[slice, ...]:
    out, start = [], 0
    for n in sizes:
        out.append(slice(start, start + n))
        start += n
    return tuple(out)


@dataclass
class ObservationVector:
    policy_kind: PolicyKind
    features: np.ndarray
    entity_slices: Tuple[slice, ...]

    def __len__(self):
        return len(self.features)

    def block(self, i: int) -> np.ndarray:
        return self.features[self.entity_slices[i]]


class _Scale:
    """Normalizers bound to one world."""

    def __init__(self, world: WorldState):
        self.size = world.map_size
        self.diag = world.map_size * math.sqrt(2.0)

    def pos(self, ac: AircraftState) -> List[float]:
        return [ac.pose.x / self.size, ac.pose.y / self.size]

    def base(self, ac: AircraftState) -> List[float]:
        return self.pos(ac) + [ac.speed / ac.spec.v_max, ac.pose.heading / 360.0]

    def dist(self, a: AircraftState, b: AircraftState) -> float:
        return distance(a.position, b.position) / self.diag


def _ata(a: AircraftState, b: AircraftState) -> float:
    return antenna_train_angle(a.pose, b.position) / 180.0


def _aa(a: AircraftState, b: AircraftState) -> float:
    # aspect of a as seen from b's tail
    return aspect_angle(a.pose, b.pose) / 180.0


def _off(a: AircraftState, b: AircraftState) -> float:
    return angle_off(a.pose.heading, b.pose.heading) / 180.0


def _ammo(ac: AircraftState, with_rockets: bool) -> List[float]:
    c1 = ac.cannon_remaining / ac.cannon_init if ac.cannon_init else 0.0
    if not with_rockets:
        return [c1]
    c2 = ac.rockets_remaining / ac.rockets_init if ac.rockets_init else 0.0
    return [c1, c2]


def _require_alive(world: WorldState, *ids: int) -> None:
    for i in ids:
        if not world.get(i).alive:
            raise ValueError(f"aircraft {i} is destroyed")


def _pad(block: Optional[List[float]], n: int) -> List[float]:
    return [0.0] * n if block is None else block


def build_fight_obs(world: WorldState, agent_id: int, target_id: int) -> ObservationVector:
    _require_alive(world, agent_id, target_id)
    sc = _Scale(world)
    me = world.get(agent_id)
    opp = world.get(target_id)
    is_ac1 = me.kind is AircraftKind.AC1

    own = sc.base(me) + [_off(me, opp), _aa(me, opp), _ata(me, opp), sc.dist(me, opp)]
    own += _ammo(me, with_rockets=False)
    if is_ac1:
        own += [_ammo(me, True)[1], float(me.rocket_ready)]
    own.append(float(me.shooting))

    o = sc.base(opp) + [_off(opp, me), _aa(opp, me), _ata(opp, me), sc.dist(opp, me), float(opp.shooting)]

    mates = world.closest(agent_id, world.teammates_of(agent_id))
    fr = None
    if mates:
        f = mates[0]
        fr = sc.pos(f) + [f.speed / f.spec.v_max, _off(f, me), _ata(f, me), _ata(me, f), sc.dist(f, me), float(f.shooting)]

    sizes = block_sizes(PolicyKind.FIGHT, me.kind)
    feats = np.array(own + o + _pad(fr, sizes[2]), dtype=np.float64)
    return ObservationVector(PolicyKind.FIGHT, feats, _slices(sizes))


def build_escape_obs(world: WorldState, agent_id: int) -> ObservationVector:
    _require_alive(world, agent_id)
    sc = _Scale(world)
    me = world.get(agent_id)
    is_ac1 = me.kind is AircraftKind.AC1
    sizes = block_sizes(PolicyKind.ESCAPE, me.kind)

    feats = sc.base(me) + _ammo(me, with_rockets=is_ac1)
    opps = world.closest(agent_id, world.enemies_of(agent_id))[:2]
    for k in range(2):
        block = None
        if k < len(opps):
            o = opps[k]
            block = sc.base(o) + [_off(o, me), _ata(o, me), _ata(me, o), sc.dist(o, me)]
        feats += _pad(block, ESCAPE_OPP_LEN)
    mates = world.closest(agent_id, world.teammates_of(agent_id))
    fr = None
    if mates:
        f = mates[0]
        fr = sc.base(f) + [_ata(f, me), _ata(me, f), sc.dist(f, me)]
    feats += _pad(fr, ESCAPE_FRIEND_LEN)
    return ObservationVector(PolicyKind.ESCAPE, np.array(feats, dtype=np.float64), _slices(sizes))


def build_commander_obs(world: WorldState, agent_id: int) -> ObservationVector:
    _require_alive(world, agent_id)
    sc = _Scale(world)
    me = world.get(agent_id)
    feats = sc.base(me)
    opps = world.closest(agent_id, world.enemies_of(agent_id))[:COMMANDER_N_OPP]
    for k in range(COMMANDER_N_OPP):
        block = None
        if k < len(opps):
            o = opps[k]
            block = sc.base(o) + [_aa(o, me), _aa(me, o), _ata(o, me), _ata(me, o), sc.dist(o, me)]
        feats += _pad(block, COMMANDER_OPP_LEN)
    mates = world.closest(agent_id, world.teammates_of(agent_id))[:COMMANDER_N_FRIEND]
    for k in range(COMMANDER_N_FRIEND):
        block = None
        if k < len(mates):
            f = mates[k]
            block = sc.pos(f) + [f.speed / f.spec.v_max, sc.dist(f, me)]
        feats += _pad(block, COMMANDER_FRIEND_LEN)
    sizes = block_sizes(PolicyKind.COMMANDER)
    return ObservationVector(PolicyKind.COMMANDER, np.array(feats, dtype=np.float64), _slices(sizes))


# centralized critic input: fixed slots, own team first (self in slot 0)
MAX_TEAM = 5
SLOT_STATE_LEN = 7
SLOT_ACTION_LEN = 4
SLOT_LEN = SLOT_STATE_LEN + SLOT_ACTION_LEN
GLOBAL_OBS_DIM = 2 * MAX_TEAM * SLOT_LEN + 2 * MAX_TEAM


def action_features(action) -> List[float]:
    """Compact [0,1] encoding of a DiscreteAction for the critic."""
    if action is None:
        return [0.0] * SLOT_ACTION_LEN
    return [(action.heading_idx + 6) / 12.0, action.speed_idx / 8.0, float(action.cannon), float(action.rocket)]


def build_global_obs(world: WorldState, agent_id: int, last_actions=None) -> np.ndarray:
    """Padded state of every aircraft plus the others' latest actions.

    The trailing ``2 * MAX_TEAM`` entries are the aliveness mask.
    """
    last_actions = last_actions or {}
    me = world.get(agent_id)
    sc = _Scale(world)
    own = [me] + [ac for ac in world.team(me.team, alive_only=False) if ac.id != agent_id]
    foe = world.team(me.team.other, alive_only=False)
    if len(own) > MAX_TEAM or len(foe) > MAX_TEAM:
        raise ValueError(f"critic supports at most {MAX_TEAM} aircraft per team")
    slots = np.zeros((2 * MAX_TEAM, SLOT_LEN))
    mask = np.zeros(2 * MAX_TEAM)
    for offset, team in ((0, own), (MAX_TEAM, foe)):
        for k, ac in enumerate(team):
            if not ac.alive:
                continue
            i = offset + k
            mask[i] = 1.0
            state = sc.base(ac) + [float(ac.kind is AircraftKind.AC1)] + _ammo(ac, True)
            act = action_features(None if ac.id == agent_id else last_actions.get(ac.id))
            slots[i] = state + act
    return np.concatenate([slots.ravel(), mask])


# ---------------------------------------------------------------- actions

HEADING_STEP = 15.0


@dataclass(frozen=True)
class DiscreteAction:
    heading_idx: int  # -6..6, positive turns left
    speed_idx: int  # 0..8
    cannon: int = 0
    rocket: int = 0

    def __post_init__(self):
        if not -6 <= self.heading_idx <= 6:
            raise ValueError(f"heading_idx {self.heading_idx} outside -6..6")
        if not 0 <= self.speed_idx <= 8:
            raise ValueError(f"speed_idx {self.speed_idx} outside 0..8")
        if self.cannon not in (0, 1) or self.rocket not in (0, 1):
            raise ValueError("fire flags must be 0 or 1")

    @classmethod
    def from_heads(cls, indices: Sequence[int]) -> "DiscreteAction":
        """Build from network head indices (heading head is offset by 6)."""
        rocket = int(indices[3]) if len(indices) > 3 else 0
        return cls(int(indices[0]) - 6, int(indices[1]), int(indices[2]), rocket)

    def to_heads(self, kind: AircraftKind) -> Tuple[int, ...]:
        heads = (self.heading_idx + 6, self.speed_idx, self.cannon)
        return heads + (self.rocket,) if AircraftKind(kind) is AircraftKind.AC1 else heads


HEAD_SIZES = {AircraftKind.AC1: (13, 9, 2, 2), AircraftKind.AC2: (13, 9, 2)}
COMMANDER_HEAD_SIZES = (4,)


def decode_action(action: DiscreteAction, state: AircraftState) -> ManeuverCommand:
    spec = state.spec
    if action.rocket and not spec.has_rockets:
        raise ValueError(f"{spec.kind.value} carries no rockets")
    heading = wrap_angle(state.pose.heading - HEADING_STEP * action.heading_idx)
    speed = spec.v_min + (action.speed_idx / 8.0) * (spec.v_max - spec.v_min)
    return ManeuverCommand(heading, speed, bool(action.cannon), bool(action.rocket))


@dataclass(frozen=True)
class CommanderAction:
    choice: int

    def __post_init__(self):
        if self.choice not in (0, 1, 2, 3):
            raise ValueError(f"commander action {self.choice} outside 0..3")

    @property
    def is_escape(self) -> bool:
        return self.choice == 0


# ---------------------------------------------------------------- rewards

BOUNDARY_PENALTY = -5.0
FRIENDLY_KILL_PENALTY = -2.0
ESCAPE_NEAR_KM = 6.0
ESCAPE_FAR_KM = 13.0
ESCAPE_STEP_REWARD = 0.01
FAVORABLE_DISTANCE_KM = 5.0
FAVORABLE_ATA = 30.0
FAVORABLE_AA = 50.0
FAVORABLE_BONUS = 0.1


@dataclass
class RewardBreakdown:
    kill_term: float = 0.0
    escape_term: float = 0.0
    boundary_term: float = 0.0
    friendly_term: float = 0.0
    commander_kill_term: float = 0.0
    commander_favorable_term: float = 0.0

    @property
    def total(self) -> float:
        return (self.kill_term + self.escape_term + self.boundary_term + self.friendly_term
                + self.commander_kill_term + self.commander_favorable_term)


def _penalties(events: Iterable[CombatEvent], agent_id: int, out: RewardBreakdown) -> RewardBreakdown:
    for ev in events:
        if ev.kind is EventKind.OUT_OF_BOUNDS and ev.victim == agent_id:
            out.boundary_term += BOUNDARY_PENALTY
        elif ev.kind is EventKind.FRIENDLY_KILL and ev.shooter == agent_id:
            out.friendly_term += FRIENDLY_KILL_PENALTY
    return out


def kill_reward(victim_ata_deg: float, c_max: int, c_rem: int) -> float:
    """Tail-aspect kill reward plus the ammunition-economy bonus."""
    return victim_ata_deg / 180.0 + (c_max - c_rem) / c_max


def fight_reward(world: WorldState, agent_id: int, events: Iterable[CombatEvent], c_max: Optional[int] = None) -> RewardBreakdown:
    """Per-step fight reward from the events of that step.

    ``world`` must be the post-step world so poses are those at the kill.
    """
    events = list(events)
    me = world.get(agent_id)
    c_max = me.ammo_max if c_max is None else c_max
    out = RewardBreakdown()
    for ev in events:
        if ev.kind is EventKind.KILL and ev.shooter == agent_id:
            victim = world.get(ev.victim)
            ata = antenna_train_angle(victim.pose, me.position)
            out.kill_term += kill_reward(ata, c_max, me.ammo_remaining)
    return _penalties(events, agent_id, out)


def escape_step_reward(min_distance: Optional[float]) -> float:
    if min_distance is None:
        return 0.0
    if min_distance < ESCAPE_NEAR_KM:
        return -ESCAPE_STEP_REWARD
    if min_distance > ESCAPE_FAR_KM:
        return ESCAPE_STEP_REWARD
    return 0.0


def escape_reward(world: WorldState, agent_id: int, events: Iterable[CombatEvent]) -> RewardBreakdown:
    events = list(events)
    me = world.get(agent_id)
    out = RewardBreakdown()
    if me.alive:
        opps = world.enemies_of(agent_id)
        d = min((distance(me.position, o.position) for o in opps), default=None)
        out.escape_term = escape_step_reward(d)
    return _penalties(events, agent_id, out)


def is_favorable(distance_km: float, ata_deg: float, aspect_deg: float, action: int = 1) -> bool:
    return (distance_km < FAVORABLE_DISTANCE_KM and ata_deg < FAVORABLE_ATA
            and aspect_deg < FAVORABLE_AA and action > 0)


def favorable_against(world: WorldState, agent_id: int, target_id: int, action: int = 1) -> bool:
    """Favorable-situation test of ``agent_id`` attacking ``target_id``."""
    me, tgt = world.get(agent_id), world.get(target_id)
    if not (me.alive and tgt.alive):
        return False
    d = distance(me.position, tgt.position)
    if d == 0.0:
        return False
    return is_favorable(d, antenna_train_angle(me.pose, tgt.position), aspect_angle(me.pose, tgt.pose), action)


def commander_reward(world: WorldState, agent_id: int, action: CommanderAction, events: Iterable[CombatEvent],
                     target_id: Optional[int] = None, decision_world: Optional[WorldState] = None) -> RewardBreakdown:
    """Commander reward for one low-level step of a macro decision.

    Pass ``decision_world`` (and the designated ``target_id``) only on the
    first step of the macro decision; the favorable bonus is judged there.
    """
    events = list(events)
    out = RewardBreakdown()
    for ev in events:
        if ev.kind is EventKind.KILL and ev.shooter == agent_id:
            out.commander_kill_term += 1.0
        elif ev.kind in (EventKind.KILL, EventKind.FRIENDLY_KILL) and ev.victim == agent_id:
            out.commander_kill_term -= 1.0
        elif ev.kind is EventKind.OUT_OF_BOUNDS and ev.victim == agent_id:
            out.boundary_term += BOUNDARY_PENALTY
    if decision_world is not None and target_id is not None and not action.is_escape:
        if favorable_against(decision_world, agent_id, target_id, action.choice):
            out.commander_favorable_term = FAVORABLE_BONUS
    return out
