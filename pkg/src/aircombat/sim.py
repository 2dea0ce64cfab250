"""
Deterministic 2D air combat world: aircraft state, kinematics, weapons and
the per-step update.
"""

import dataclasses
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Point, Pose2D, antenna_train_angle, distance, wrap_angle

DT = 1.0
KNOT_KM_PER_S = 1.852 / 3600.0


class AircraftKind(str, Enum):
    AC1 = "AC1"
    AC2 = "AC2"


class Team(str, Enum):
    AGENT = "agent"
    OPPONENT = "opponent"

    @property
    def other(self) -> "Team":
        return Team.OPPONENT if self is Team.AGENT else Team.AGENT


class Weapon(str, Enum):
    CANNON = "cannon"
    ROCKET = "rocket"


@dataclass(frozen=True)
class AircraftTypeSpec:
    kind: AircraftKind
    omega_max: float  # deg/s
    v_min: float  # knots
    v_max: float
    wez_half_angle: float  # deg
    wez_range: float  # km
    p_hit: float
    has_rockets: bool
    rocket_count_init: int
    cannon_count_init: int
    rocket_cooldown: int = 10  # steps
    rocket_range: float = 7.0
    rocket_half_angle: float = 10.0

    def clamp_speed(self, speed: float) -> float:
        return min(max(speed, self.v_min), self.v_max)


AC1 = AircraftTypeSpec(
    kind=AircraftKind.AC1, omega_max=5.0, v_min=100.0, v_max=900.0,
    wez_half_angle=10.0, wez_range=2.0, p_hit=0.70,
    has_rockets=True, rocket_count_init=5, cannon_count_init=200,
)
AC2 = AircraftTypeSpec(
    kind=AircraftKind.AC2, omega_max=3.5, v_min=100.0, v_max=600.0,
    wez_half_angle=7.0, wez_range=4.5, p_hit=0.85,
    has_rockets=False, rocket_count_init=0, cannon_count_init=200,
    rocket_cooldown=0, rocket_range=0.0, rocket_half_angle=0.0,
)
TYPE_SPECS: Dict[AircraftKind, AircraftTypeSpec] = {AircraftKind.AC1: AC1, AircraftKind.AC2: AC2}


def type_spec(kind) -> AircraftTypeSpec:
    return TYPE_SPECS[AircraftKind(kind.upper())]


@dataclass
class AircraftState:
    id: int
    team: Team
    spec: AircraftTypeSpec
    pose: Pose2D
    speed: float
    cannon_remaining: int
    rockets_remaining: int
    cannon_init: int
    rockets_init: int
    rocket_cooldown: int = 0
    shooting: bool = False
    alive: bool = True

    @property
    def kind(self) -> AircraftKind:
        return self.spec.kind

    @property
    def position(self) -> Point:
        return (self.pose.x, self.pose.y)

    @property
    def rocket_ready(self) -> bool:
        return self.spec.has_rockets and self.rockets_remaining > 0 and self.rocket_cooldown == 0

    @property
    def ammo_max(self) -> int:
        return self.cannon_init + self.rockets_init

    @property
    def ammo_remaining(self) -> int:
        return self.cannon_remaining + self.rockets_remaining

    def copy(self) -> "AircraftState":
        return dataclasses.replace(self)


@dataclass(frozen=True)
class ManeuverCommand:
    target_heading: float
    target_speed: float
    fire_cannon: bool = False
    fire_rocket: bool = False


class EventKind(str, Enum):
    KILL = "Kill"
    FRIENDLY_KILL = "FriendlyKill"
    OUT_OF_BOUNDS = "OutOfBounds"
    ROCKET_FIRED = "RocketFired"
    CANNON_FIRED = "CannonFired"


DESTRUCTIONS = (EventKind.KILL, EventKind.FRIENDLY_KILL, EventKind.OUT_OF_BOUNDS)


@dataclass(frozen=True)
class CombatEvent:
    kind: EventKind
    shooter: Optional[int]
    victim: Optional[int]
    step: int

    def __post_init__(self):
        if self.kind in (EventKind.KILL, EventKind.FRIENDLY_KILL) and (
            self.shooter is None or self.victim is None
        ):
            raise ValueError(f"{self.kind.value} events need shooter and victim")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "shooter": self.shooter, "victim": self.victim, "step": self.step}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CombatEvent":
        return cls(EventKind(d["kind"]), d["shooter"], d["victim"], d["step"])


@dataclass
class WorldState:
    aircraft: List[AircraftState]
    map_size: float
    horizon: int
    rng: np.random.Generator
    step: int = 0

    def __post_init__(self):
        self._by_id = {ac.id: i for i, ac in enumerate(self.aircraft)}

    def get(self, aircraft_id: int) -> AircraftState:
        return self.aircraft[self._by_id[aircraft_id]]

    def replace(self, state: AircraftState) -> None:
        self.aircraft[self._by_id[state.id]] = state

    def team(self, team: Team, alive_only: bool = True) -> List[AircraftState]:
        return [ac for ac in self.aircraft if ac.team is team and (ac.alive or not alive_only)]

    def enemies_of(self, aircraft_id: int) -> List[AircraftState]:
        return self.team(self.get(aircraft_id).team.other)

    def teammates_of(self, aircraft_id: int) -> List[AircraftState]:
        me = self.get(aircraft_id)
        return [ac for ac in self.team(me.team) if ac.id != aircraft_id]

    def closest(self, aircraft_id: int, candidates: Sequence[AircraftState]) -> List[AircraftState]:
        """Candidates sorted by distance to ``aircraft_id`` (ties by id)."""
        pos = self.get(aircraft_id).position
        return sorted(candidates, key=lambda ac: (distance(pos, ac.position), ac.id))

    @property
    def horizon_reached(self) -> bool:
        return self.step >= self.horizon

    @property
    def done(self) -> bool:
        return self.horizon_reached or not self.team(Team.AGENT) or not self.team(Team.OPPONENT)

    def copy(self) -> "WorldState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return WorldState([ac.copy() for ac in self.aircraft], self.map_size, self.horizon, rng, self.step)


def knots_to_km_per_step(speed: float, dt: float = DT) -> float:
    if speed < 0:
        raise ValueError("speed must be non-negative")
    return speed * KNOT_KM_PER_S * dt


def step_aircraft(state: AircraftState, cmd: ManeuverCommand, dt: float = DT) -> AircraftState:
    """Slew heading toward the command, set speed, then translate."""
    if not state.alive:
        raise ValueError(f"aircraft {state.id} is destroyed and cannot maneuver")
    spec = state.spec
    heading = state.pose.heading
    # signed shortest-arc difference in [-180, 180)
    delta = (wrap_angle(cmd.target_heading) - heading + 180.0) % 360.0 - 180.0
    budget = spec.omega_max * dt
    delta = min(max(delta, -budget), budget)
    new_heading = wrap_angle(heading + delta)
    speed = spec.clamp_speed(cmd.target_speed)
    step = knots_to_km_per_step(speed, dt)
    rad = math.radians(new_heading)
    pose = Pose2D(state.pose.x + step * math.sin(rad), state.pose.y + step * math.cos(rad), new_heading)
    return dataclasses.replace(state, pose=pose, speed=speed)


def in_wez(shooter: AircraftState, target_position: Point, envelope: Weapon = Weapon.CANNON) -> bool:
    envelope = Weapon(envelope)
    spec = shooter.spec
    if envelope is Weapon.CANNON:
        half_angle, rng = spec.wez_half_angle, spec.wez_range
    else:
        if not spec.has_rockets:
            return False
        half_angle, rng = spec.rocket_half_angle, spec.rocket_range
    d = distance(shooter.position, target_position)
    if d > rng:
        return False
    if d == 0.0:
        return False
    return antenna_train_angle(shooter.pose, target_position) <= half_angle


def _weapon_available(shooter: AircraftState, weapon: Weapon) -> bool:
    if weapon is Weapon.CANNON:
        return shooter.cannon_remaining > 0
    return shooter.rocket_ready


def _fire(world: WorldState, shooter: AircraftState, weapon: Weapon, alive_ids) -> Tuple[List[CombatEvent], Optional[int]]:
    """Spend one round and roll the hit. Returns events and the hit victim id."""
    if weapon is Weapon.CANNON:
        shooter.cannon_remaining -= 1
        events = [CombatEvent(EventKind.CANNON_FIRED, shooter.id, None, world.step)]
    else:
        shooter.rockets_remaining -= 1
        shooter.rocket_cooldown = shooter.spec.rocket_cooldown
        events = [CombatEvent(EventKind.ROCKET_FIRED, shooter.id, None, world.step)]
    shooter.shooting = True

    candidates = [
        ac for ac in world.aircraft
        if ac.id != shooter.id and ac.id in alive_ids and in_wez(shooter, ac.position, weapon)
    ]
    if not candidates:
        return events, None
    victim = min(candidates, key=lambda ac: (distance(shooter.position, ac.position), ac.id))
    if world.rng.random() < shooter.spec.p_hit:
        return events, victim.id
    return events, None


def _kill_event(world: WorldState, shooter_id: int, victim_id: int) -> CombatEvent:
    same_team = world.get(shooter_id).team is world.get(victim_id).team
    kind = EventKind.FRIENDLY_KILL if same_team else EventKind.KILL
    return CombatEvent(kind, shooter_id, victim_id, world.step)


def resolve_fire(world: WorldState, shooter_id: int, weapon: Weapon = Weapon.CANNON) -> Tuple[WorldState, List[CombatEvent]]:
    """Resolve a single fire request in isolation.

    Requests without ammunition (or an unready rocket) are silently ignored.
    """
    weapon = Weapon(weapon)
    shooter = world.get(shooter_id)
    if not shooter.alive:
        raise ValueError(f"aircraft {shooter_id} is destroyed and cannot fire")
    if not _weapon_available(shooter, weapon):
        return world, []
    alive_ids = {ac.id for ac in world.aircraft if ac.alive}
    events, victim = _fire(world, shooter, weapon, alive_ids)
    if victim is not None:
        world.get(victim).alive = False
        events.append(_kill_event(world, shooter_id, victim))
    return world, events


def out_of_bounds(position: Point, map_size: float) -> bool:
    x, y = position
    return not (0.0 <= x <= map_size and 0.0 <= y <= map_size)


def check_boundary(world: WorldState) -> List[CombatEvent]:
    events = []
    for ac in world.aircraft:
        if ac.alive and out_of_bounds(ac.position, world.map_size):
            ac.alive = False
            events.append(CombatEvent(EventKind.OUT_OF_BOUNDS, None, ac.id, world.step))
    return events


def advance(world: WorldState, commands: Mapping[int, ManeuverCommand]) -> Tuple[WorldState, List[CombatEvent]]:
    """One simultaneous world step; mutates and returns ``world``.

    Order: kinematics for every alive aircraft, fire resolution in ascending
    id against pre-resolution aliveness, boundary check, cooldown tick.
    """
    alive = [ac for ac in world.aircraft if ac.alive]
    missing = [ac.id for ac in alive if ac.id not in commands]
    if missing:
        raise ValueError(f"missing commands for alive aircraft {missing}")

    for ac in alive:
        moved = step_aircraft(ac, commands[ac.id])
        moved.shooting = False
        world.replace(moved)

    alive_ids = {ac.id for ac in alive}
    events: List[CombatEvent] = []
    destroyed = set()
    for shooter_id in sorted(alive_ids):
        shooter = world.get(shooter_id)
        cmd = commands[shooter_id]
        for weapon, wanted in ((Weapon.CANNON, cmd.fire_cannon), (Weapon.ROCKET, cmd.fire_rocket)):
            if not wanted or not _weapon_available(shooter, weapon):
                continue
            fired, victim = _fire(world, shooter, weapon, alive_ids)
            events.extend(fired)
            if victim is not None and victim not in destroyed:
                destroyed.add(victim)
                events.append(_kill_event(world, shooter_id, victim))
    for victim in destroyed:
        world.get(victim).alive = False

    events.extend(check_boundary(world))

    for ac in world.aircraft:
        if ac.rocket_cooldown > 0:
            ac.rocket_cooldown -= 1
    world.step += 1
    return world, events


@dataclass
class ScenarioConfig:
    """Episode setup. Type lists are optional; missing ones are randomized."""

    n_agents: int = 2
    n_opponents: int = 2
    agent_types: Optional[List[str]] = None
    opponent_types: Optional[List[str]] = None
    map_size: float = 30.0
    horizon: int = 200
    agent_cannon: int = 200
    agent_rockets: int = 5
    opponent_cannon: int = 400
    opponent_rockets: int = 8

    def validate(self) -> None:
        if self.n_agents < 1 or self.n_opponents < 1:
            raise ValueError("team sizes must be at least 1")
        if self.map_size <= 0 or self.horizon < 1:
            raise ValueError("map_size and horizon must be positive")
        for n, types, label in (
            (self.n_agents, self.agent_types, "agent"),
            (self.n_opponents, self.opponent_types, "opponent"),
        ):
            if types is None:
                continue
            if len(types) != n:
                raise ValueError(f"{label}_types has {len(types)} entries for {n} aircraft")
            kinds = {AircraftKind(str(t).upper()) for t in types}
            if n >= 2 and len(kinds) < 2:
                raise ValueError(f"{label} team of {n} needs at least one AC1 and one AC2")
        for v in (self.agent_cannon, self.agent_rockets, self.opponent_cannon, self.opponent_rockets):
            if v < 0:
                raise ValueError("ammunition must be non-negative")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def versus(cls, n: int, m: Optional[int] = None, **kw) -> "ScenarioConfig":
        return cls(n_agents=n, n_opponents=n if m is None else m, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _draw_types(n: int, given, rng: np.random.Generator) -> List[AircraftKind]:
    if given is not None:
        return [AircraftKind(str(t).upper()) for t in given]
    if n == 1:
        return [AircraftKind.AC1 if rng.random() < 0.5 else AircraftKind.AC2]
    kinds = [AircraftKind.AC1, AircraftKind.AC2] + [
        AircraftKind.AC1 if rng.random() < 0.5 else AircraftKind.AC2 for _ in range(n - 2)
    ]
    order = rng.permutation(n)
    return [kinds[i] for i in order]


# spawn box as fractions of the map: inset from outer edges and the midline
SPAWN_OUTER = 0.2
SPAWN_INNER = 0.05


def init_episode(config: ScenarioConfig, seed) -> WorldState:
    """Fresh world: teams on opposite, randomly chosen halves of the map."""
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.map_size
    agent_left = bool(rng.random() < 0.5)
    aircraft: List[AircraftState] = []
    next_id = 0
    for team, n, types, cannon, rockets, left in (
        (Team.AGENT, config.n_agents, config.agent_types, config.agent_cannon, config.agent_rockets, agent_left),
        (Team.OPPONENT, config.n_opponents, config.opponent_types, config.opponent_cannon, config.opponent_rockets, not agent_left),
    ):
        lo, hi = (SPAWN_OUTER, 0.5 - SPAWN_INNER) if left else (0.5 + SPAWN_INNER, 1.0 - SPAWN_OUTER)
        for kind in _draw_types(n, types, rng):
            spec = TYPE_SPECS[kind]
            x = rng.uniform(lo, hi) * size
            y = rng.uniform(SPAWN_OUTER, 1.0 - SPAWN_OUTER) * size
            heading = rng.uniform(0.0, 360.0)
            speed = rng.uniform(spec.v_min, spec.v_max)
            n_rockets = rockets if spec.has_rockets else 0
            aircraft.append(AircraftState(
                id=next_id, team=team, spec=spec, pose=Pose2D(x, y, heading), speed=speed,
                cannon_remaining=cannon, rockets_remaining=n_rockets,
                cannon_init=cannon, rockets_init=n_rockets,
            ))
            next_id += 1
    return WorldState(aircraft=aircraft, map_size=size, horizon=config.horizon, rng=rng)
