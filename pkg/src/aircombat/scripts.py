"""Non-learning opponent controllers used by the early curriculum levels."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import bearing, distance, wrap_angle
from .policy_io import HEAD_SIZES, DiscreteAction, decode_action
from .sim import AircraftState, ManeuverCommand, Weapon, WorldState, in_wez

ESCAPE_PROBABILITY = 0.05
ESCAPE_STEPS = 20
SLOWDOWN_RANGE_KM = 5.0


def static_policy(state: AircraftState) -> ManeuverCommand:
    return ManeuverCommand(state.pose.heading, state.spec.v_min)


def random_action(state: AircraftState, rng: np.random.Generator) -> DiscreteAction:
    heads = HEAD_SIZES[state.kind]
    idx = [int(rng.integers(n)) for n in heads]
    return DiscreteAction.from_heads(idx)


def random_policy(state: AircraftState, rng: np.random.Generator) -> ManeuverCommand:
    return decode_action(random_action(state, rng), state)


@dataclass
class ScriptState:
    rng: np.random.Generator
    mode: str = "pursue"
    escape_steps_left: int = 0

    def __post_init__(self):
        if self.mode not in ("pursue", "escape"):
            raise ValueError(f"unknown script mode {self.mode!r}")
        if (self.escape_steps_left > 0) != (self.mode == "escape"):
            raise ValueError("escape_steps_left must be positive exactly in escape mode")


def pursuit_speed(state: AircraftState, dist: float) -> float:
    spec = state.spec
    if dist > SLOWDOWN_RANGE_KM:
        return spec.v_max
    return spec.v_min + (spec.v_max - spec.v_min) * dist / SLOWDOWN_RANGE_KM


def script_policy(world: WorldState, self_id: int, script: ScriptState) -> Tuple[ManeuverCommand, ScriptState]:
    """Pure pursuit of the closest enemy with random escape bursts."""
    me = world.get(self_id)
    if not me.alive:
        raise ValueError(f"aircraft {self_id} is destroyed")
    enemies = world.closest(self_id, world.enemies_of(self_id))
    if not enemies:
        return ManeuverCommand(me.pose.heading, me.speed), script
    target = enemies[0]
    los = bearing(me.position, target.position)

    mode, left = script.mode, script.escape_steps_left
    if mode == "pursue" and script.rng.random() < ESCAPE_PROBABILITY:
        mode, left = "escape", ESCAPE_STEPS
    if mode == "escape":
        left -= 1
        nxt = ScriptState(script.rng, "escape", left) if left > 0 else ScriptState(script.rng)
        return ManeuverCommand(wrap_angle(los + 180.0), me.spec.v_max), nxt

    d = distance(me.position, target.position)
    cmd = ManeuverCommand(
        target_heading=los,
        target_speed=pursuit_speed(me, d),
        fire_cannon=in_wez(me, target.position, Weapon.CANNON),
        fire_rocket=me.rocket_ready and in_wez(me, target.position, Weapon.ROCKET),
    )
    return cmd, ScriptState(script.rng)
