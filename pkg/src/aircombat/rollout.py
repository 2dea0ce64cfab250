"""
Lock-step episode runner for low-level (fight/escape) play.

Several independent episodes ("lanes") advance together so that network
forwards are batched across lanes. Each lane owns its random streams,
derived from the episode seed, so results depend only on the seed and the
lane layout.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .nets import PolicyGroup, sample_index
from .policy_io import (
    DiscreteAction, PolicyKind, build_escape_obs, build_fight_obs, build_global_obs,
    decode_action, escape_reward, fight_reward,
)
from .scripts import ScriptState, random_action, script_policy, static_policy
from .sim import (
    AircraftKind, CombatEvent, ManeuverCommand, ScenarioConfig, Team,
    WorldState, advance, init_episode,
)


def episode_streams(seed: int, episode: int, n: int = 3) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence([int(seed), int(episode)]).spawn(n)


# ------------------------------------------------------------------ roles

@dataclass
class NeuralRole:
    """Aircraft driven by a policy network.

    ``record`` marks learners whose transitions go into the buffer. Fight
    roles observe the closest enemy unless a target is pinned.
    """

    group: PolicyGroup
    policy: PolicyKind = PolicyKind.FIGHT
    record: bool = False


@dataclass
class ScriptedRole:
    behavior: str  # static | random | script
    state: Optional[ScriptState] = None


Role = object


@dataclass
class Transition:
    obs: np.ndarray
    global_obs: np.ndarray
    action: Tuple[int, ...]
    log_prob: float
    reward: float
    done: bool
    value: float
    hidden: Optional[np.ndarray]
    agent_id: int
    kind: Optional[AircraftKind]
    episode: int = -1


@dataclass
class EpisodeResult:
    episode: int
    outcome: str  # win | loss | draw
    steps: int
    agent_return: float  # mean over agents of summed rewards
    events: List[CombatEvent]
    kinds: Dict[int, AircraftKind]
    teams: Dict[int, Team]
    opponent_source: str = ""


def classify_outcome(world: WorldState) -> str:
    if not world.team(Team.OPPONENT):
        return "win"
    if not world.team(Team.AGENT):
        return "loss"
    return "draw"


@dataclass
class _Lane:
    episode: int
    world: WorldState
    roles: Dict[int, Role]
    rng: np.random.Generator
    opponent_source: str
    trajectories: Dict[int, List[Transition]] = field(default_factory=dict)
    returns: Dict[int, float] = field(default_factory=dict)
    last_actions: Dict[int, DiscreteAction] = field(default_factory=dict)
    events: List[CombatEvent] = field(default_factory=list)
    step_hook: Optional[Callable] = None


# the caller builds roles per episode: (world, streams) -> (roles, label)
RoleFactory = Callable[[WorldState, np.random.Generator, int], Tuple[Dict[int, Role], str]]


def _obs_for(world: WorldState, ac_id: int, policy: PolicyKind) -> np.ndarray:
    if policy is PolicyKind.ESCAPE:
        return build_escape_obs(world, ac_id).features
    target = world.closest(ac_id, world.enemies_of(ac_id))[0]
    return build_fight_obs(world, ac_id, target.id).features


def _scripted_command(role: ScriptedRole, world: WorldState, ac_id: int, rng: np.random.Generator):
    ac = world.get(ac_id)
    if role.behavior == "static":
        return static_policy(ac), None
    if role.behavior == "random":
        a = random_action(ac, rng)
        return decode_action(a, ac), a
    if role.behavior == "script":
        cmd, role.state = script_policy(world, ac_id, role.state)
        return cmd, None
    raise ValueError(f"unknown scripted behavior {role.behavior!r}")


def run_lanes(
    scenario: ScenarioConfig,
    episodes: Sequence[int],
    seed: int,
    make_roles: RoleFactory,
    on_transitions: Optional[Callable[[List[Transition]], None]] = None,
    step_hook: Optional[Callable[[int, WorldState, List[CombatEvent]], None]] = None,
) -> List[EpisodeResult]:
    """Play ``episodes`` (indices) in lock-step and return their results.

    Completed learner trajectories are handed to ``on_transitions`` with
    ``done`` set on their final step.
    """
    lanes: List[_Lane] = []
    for ep in episodes:
        world_ss, act_ss, role_ss = episode_streams(seed, ep)
        world = init_episode(scenario, world_ss)
        role_rng = np.random.default_rng(role_ss)
        roles, label = make_roles(world, role_rng, ep)
        lane = _Lane(ep, world, roles, np.random.default_rng(act_ss), label)
        for ac in world.aircraft:
            role = roles[ac.id]
            if isinstance(role, NeuralRole) and role.record:
                lane.trajectories[ac.id] = []
            if ac.team is Team.AGENT:
                lane.returns[ac.id] = 0.0
        lanes.append(lane)
        if step_hook:
            step_hook(ep, world, [])

    results: Dict[int, EpisodeResult] = {}
    active = list(lanes)
    while active:
        # gather network requests across lanes: key -> list of (lane, ac_id, obs, gobs)
        requests: Dict[Tuple[int, AircraftKind], list] = {}
        nets: Dict[Tuple[int, AircraftKind], Tuple[NeuralRole, object]] = {}
        commands: Dict[int, Dict[int, ManeuverCommand]] = {}
        for lane in active:
            commands[lane.episode] = {}
            for ac in lane.world.aircraft:
                if not ac.alive:
                    continue
                role = lane.roles[ac.id]
                if isinstance(role, NeuralRole):
                    key = (id(role.group), ac.kind, role.policy, role.record)
                    obs = _obs_for(lane.world, ac.id, role.policy)
                    gobs = build_global_obs(lane.world, ac.id, lane.last_actions) if role.record else None
                    requests.setdefault(key, []).append((lane, ac.id, obs, gobs))
                    nets[key] = (role, role.group[ac.kind])
                else:
                    cmd, act = _scripted_command(role, lane.world, ac.id, lane.rng)
                    commands[lane.episode][ac.id] = cmd
                    if act is not None:
                        lane.last_actions[ac.id] = act

        decisions = {}
        with torch.no_grad():
            for key in sorted(requests, key=lambda k: (k[0], k[1].value, k[2].value, k[3])):
                role, net = nets[key]
                reqs = requests[key]
                obs = torch.as_tensor(np.stack([r[2] for r in reqs]))
                feats, _ = net.features(obs)
                probs = [torch.softmax(l, dim=-1).numpy() for l in net.logits(feats)]
                values = None
                if role.record:
                    gobs = torch.as_tensor(np.stack([r[3] for r in reqs]))
                    values = net.value(feats, gobs).numpy()
                for j, (lane, ac_id, o, g) in enumerate(reqs):
                    decisions[(lane.episode, ac_id)] = ([p[j] for p in probs], None if values is None else float(values[j]), o, g)

        # sample in a fixed (lane, aircraft) order so streams are reproducible
        pending: Dict[int, Dict[int, Transition]] = {}
        for lane in active:
            pending[lane.episode] = {}
            for ac in lane.world.aircraft:
                d = decisions.get((lane.episode, ac.id))
                if d is None:
                    continue
                probs, value, o, g = d
                idx, logp = [], 0.0
                for p in probs:
                    i = sample_index(p, lane.rng.random())
                    idx.append(i)
                    logp += float(np.log(p[i]))
                action = DiscreteAction.from_heads(idx)
                lane.last_actions[ac.id] = action
                commands[lane.episode][ac.id] = decode_action(action, ac)
                if ac.id in lane.trajectories:
                    pending[lane.episode][ac.id] = Transition(
                        obs=o, global_obs=g, action=tuple(idx), log_prob=logp, reward=0.0, done=False,
                        value=value, hidden=None, agent_id=ac.id, kind=ac.kind, episode=lane.episode,
                    )

        still = []
        for lane in active:
            world = lane.world
            alive_before = {ac.id for ac in world.aircraft if ac.alive}
            _, events = advance(world, commands[lane.episode])
            lane.events.extend(events)
            if step_hook:
                step_hook(lane.episode, world, events)
            done = world.done
            for ac_id in sorted(alive_before):
                ac = world.get(ac_id)
                if ac.team is not Team.AGENT:
                    continue
                role = lane.roles[ac_id]
                policy = role.policy if isinstance(role, NeuralRole) else PolicyKind.FIGHT
                if policy is PolicyKind.ESCAPE:
                    r = escape_reward(world, ac_id, events).total
                else:
                    r = fight_reward(world, ac_id, events).total
                lane.returns[ac_id] += r
                tr = pending[lane.episode].get(ac_id)
                if tr is None:
                    continue
                tr.reward = r
                traj = lane.trajectories[ac_id]
                traj.append(tr)
                if done or not ac.alive:
                    tr.done = True
                    if on_transitions:
                        on_transitions(traj)
                    lane.trajectories[ac_id] = []
            if done:
                n = len(lane.returns)
                results[lane.episode] = EpisodeResult(
                    episode=lane.episode,
                    outcome=classify_outcome(world),
                    steps=world.step,
                    agent_return=sum(lane.returns.values()) / n,
                    events=lane.events,
                    kinds={ac.id: ac.kind for ac in world.aircraft},
                    teams={ac.id: ac.team for ac in world.aircraft},
                    opponent_source=lane.opponent_source,
                )
            else:
                still.append(lane)
        active = still
    return [results[ep] for ep in episodes]
