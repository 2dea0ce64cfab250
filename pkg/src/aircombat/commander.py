"""
Hierarchical control: a commander picks, per agent, an option (escape, or
fight a chosen opponent) that runs the frozen low-level policies for up to
ten steps or until a trigger event fires.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .geometry import antenna_train_angle, aspect_angle, distance
from .nets import PolicyGroup, sample_index
from .policy_io import (
    FAVORABLE_ATA, FAVORABLE_AA, FAVORABLE_DISTANCE_KM, CommanderAction, DiscreteAction, PolicyKind,
    RewardBreakdown, build_commander_obs, build_escape_obs, build_fight_obs, build_global_obs,
    commander_reward, decode_action, escape_reward, fight_reward,
)
from .rollout import classify_outcome, episode_streams
from .sim import (
    DESTRUCTIONS, AircraftKind, CombatEvent, ScenarioConfig, Team, WorldState, advance, init_episode,
)

MACRO_HORIZON = 40
OPTION_STEPS = 10
NEAR_BOUNDARY_KM = 6.0
THREAT_DISTANCE_KM = 5.0
THREAT_ATA = 30.0


class TriggerKind(str, Enum):
    AIRCRAFT_DESTROYED = "AircraftDestroyed"
    NEAR_BOUNDARY = "NearBoundary"
    FAVORABLE_SITUATION = "FavorableSituation"
    TWO_ON_ONE_THREAT = "TwoOnOneThreat"


@dataclass(frozen=True)
class TriggerEvent:
    kind: TriggerKind
    subjects: Tuple[int, ...]


def _edge_distance(world: WorldState, ac) -> float:
    x, y = ac.position
    s = world.map_size
    return min(x, y, s - x, s - y)


def _favorable(world_ac, enemy) -> bool:
    d = distance(world_ac.position, enemy.position)
    if d == 0.0 or d >= FAVORABLE_DISTANCE_KM:
        return False
    return (antenna_train_angle(world_ac.pose, enemy.position) < FAVORABLE_ATA
            and aspect_angle(world_ac.pose, enemy.pose) < FAVORABLE_AA)


def detect_events(world: WorldState, step_events: Iterable[CombatEvent] = ()) -> FrozenSet[TriggerEvent]:
    """Commander trigger events for the current world.

    ``step_events`` are the combat events of the step just simulated; any
    destruction among them raises AircraftDestroyed.
    """
    out = set()
    for ev in step_events:
        if ev.kind in DESTRUCTIONS:
            out.add(TriggerEvent(TriggerKind.AIRCRAFT_DESTROYED, (ev.victim,)))
    alive = [ac for ac in world.aircraft if ac.alive]
    for ac in alive:
        enemies = [e for e in alive if e.team is not ac.team]
        if ac.team is Team.AGENT and _edge_distance(world, ac) < NEAR_BOUNDARY_KM:
            out.add(TriggerEvent(TriggerKind.NEAR_BOUNDARY, (ac.id,)))
        for e in enemies:
            if _favorable(ac, e):
                out.add(TriggerEvent(TriggerKind.FAVORABLE_SITUATION, (ac.id, e.id)))
        if ac.team is Team.AGENT:
            threats = []
            for e in enemies:
                d = distance(e.position, ac.position)
                if 0.0 < d < THREAT_DISTANCE_KM and antenna_train_angle(e.pose, ac.position) < THREAT_ATA:
                    threats.append(e.id)
            if len(threats) >= 2:
                out.add(TriggerEvent(TriggerKind.TWO_ON_ONE_THREAT, (ac.id,) + tuple(sorted(threats))))
    return frozenset(out)


@dataclass
class OptionAssignment:
    agent_id: int
    option: str  # fight | escape
    target_id: Optional[int]
    started_at: int
    budget: int = OPTION_STEPS

    def __post_init__(self):
        if self.option not in ("fight", "escape"):
            raise ValueError(f"unknown option {self.option!r}")
        if self.option == "fight" and self.target_id is None:
            raise ValueError("fight options need a target")
        if not 1 <= self.budget <= OPTION_STEPS:
            raise ValueError(f"option budget must be in 1..{OPTION_STEPS}")

    @property
    def policy(self) -> PolicyKind:
        return PolicyKind.FIGHT if self.option == "fight" else PolicyKind.ESCAPE


@dataclass
class MacroTransition:
    agent_id: int
    obs: np.ndarray
    global_obs: np.ndarray
    action: int
    log_prob: float
    value: float
    hidden: Optional[np.ndarray]
    reward: float
    duration: int
    next_obs: Optional[np.ndarray]
    done: bool
    step_rewards: List[Tuple[RewardBreakdown, RewardBreakdown]] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.duration <= OPTION_STEPS:
            raise ValueError(f"macro duration {self.duration} outside 1..{OPTION_STEPS}")


def resolve_target(world: WorldState, agent_id: int, choice: int) -> Optional[int]:
    """k-th closest alive opponent, falling back to the closest one."""
    if choice == 0:
        return None
    opps = world.closest(agent_id, world.enemies_of(agent_id))
    if not opps:
        return None
    return opps[choice - 1].id if choice <= len(opps) else opps[0].id


@dataclass
class EpisodeRecord:
    seed: int
    outcome: str
    macro_steps: int
    low_steps: int
    transitions: List[MacroTransition]
    events: List[CombatEvent]
    triggers: List[FrozenSet[TriggerEvent]]
    kinds: Dict[int, AircraftKind]
    teams: Dict[int, Team]


class HierarchicalEpisode:
    """One commander-driven episode.

    ``commander`` may be None, in which case every agent fights its closest
    opponent (a baseline). Opponents pick fight (target: closest agent) with
    probability ``fight_prob`` per macro step and escape otherwise.
    """

    def __init__(self, scenario: ScenarioConfig, commander: Optional[PolicyGroup], fight: PolicyGroup,
                 escape: PolicyGroup, seed, fight_prob: float = 0.8, macro_horizon: int = MACRO_HORIZON,
                 option_steps: int = OPTION_STEPS, greedy: bool = False, record_values: bool = False,
                 step_hook=None):
        world_ss, act_ss, opp_ss = episode_streams(int(seed[0]) if isinstance(seed, tuple) else seed,
                                                   int(seed[1]) if isinstance(seed, tuple) else 0)
        self.seed = seed
        self.world = init_episode(scenario, world_ss)
        self.rng = np.random.default_rng(act_ss)
        self.opp_rng = np.random.default_rng(opp_ss)
        self.commander = None if commander is None else commander[None]
        self.fight = fight
        self.escape = escape
        self.fight_prob = fight_prob
        self.macro_horizon = macro_horizon
        self.option_steps = option_steps
        self.greedy = greedy
        self.record_values = record_values
        self.step_hook = step_hook
        self.hidden: Dict[int, torch.Tensor] = {}
        if self.commander is not None:
            for ac in self.world.team(Team.AGENT):
                self.hidden[ac.id] = self.commander.initial_state(1)
        self.last_actions: Dict[int, DiscreteAction] = {}
        self.macro_count = 0
        self.events: List[CombatEvent] = []
        self.triggers: List[FrozenSet[TriggerEvent]] = []
        self.transitions: List[MacroTransition] = []
        if step_hook:
            step_hook(self.world, [])

    @property
    def done(self) -> bool:
        return self.world.done or self.macro_count >= self.macro_horizon

    # -- decisions

    def _draw(self, probs: Sequence[np.ndarray]) -> Tuple[List[int], float]:
        idx, logp = [], 0.0
        for p in probs:
            i = int(np.argmax(p)) if self.greedy else sample_index(p, self.rng.random())
            idx.append(i)
            logp += float(np.log(p[i]))
        return idx, logp

    def _commander_decisions(self):
        decisions = {}
        for ac in self.world.team(Team.AGENT):
            obs = build_commander_obs(self.world, ac.id).features
            gobs = build_global_obs(self.world, ac.id, self.last_actions)
            if self.commander is None:
                decisions[ac.id] = (obs, gobs, 1, 0.0, 0.0, None)
                continue
            h = self.hidden[ac.id]
            with torch.no_grad():
                x = torch.as_tensor(obs)[None]
                feats, new_h = self.commander.features(x, h)
                probs = [torch.softmax(l, -1)[0].numpy() for l in self.commander.logits(feats)]
                value = float(self.commander.value(feats, torch.as_tensor(gobs)[None])[0]) if self.record_values else 0.0
            (choice,), logp = self._draw(probs)
            decisions[ac.id] = (obs, gobs, choice, logp, value, h[0].numpy().copy())
            self.hidden[ac.id] = new_h
        return decisions

    def _low_level_actions(self, options: Dict[int, OptionAssignment]):
        requests: Dict[Tuple[PolicyKind, AircraftKind], list] = {}
        for ac in self.world.aircraft:
            if not ac.alive:
                continue
            opt = options[ac.id]
            if opt.policy is PolicyKind.FIGHT:
                target = opt.target_id
                if target is None or not self.world.get(target).alive:
                    target = self.world.closest(ac.id, self.world.enemies_of(ac.id))[0].id
                obs = build_fight_obs(self.world, ac.id, target).features
            else:
                obs = build_escape_obs(self.world, ac.id).features
            requests.setdefault((opt.policy, ac.kind), []).append((ac.id, obs))
        probs_by_id = {}
        with torch.no_grad():
            for (policy, kind), reqs in requests.items():
                net = (self.fight if policy is PolicyKind.FIGHT else self.escape)[kind]
                feats, _ = net.features(torch.as_tensor(np.stack([o for _, o in reqs])))
                probs = [torch.softmax(l, -1).numpy() for l in net.logits(feats)]
                for j, (ac_id, _) in enumerate(reqs):
                    probs_by_id[ac_id] = [p[j] for p in probs]
        commands = {}
        for ac in self.world.aircraft:
            if not ac.alive:
                continue
            idx, _ = self._draw(probs_by_id[ac.id])
            action = DiscreteAction.from_heads(idx)
            self.last_actions[ac.id] = action
            commands[ac.id] = decode_action(action, ac)
        return commands

    def macro_step(self) -> List[MacroTransition]:
        """Decide options for every alive agent and run them to a break."""
        world = self.world
        decisions = self._commander_decisions()
        decision_world = world.copy()
        options: Dict[int, OptionAssignment] = {}
        for agent_id, (_, _, choice, *_rest) in decisions.items():
            target = resolve_target(world, agent_id, choice)
            options[agent_id] = (OptionAssignment(agent_id, "escape", None, world.step) if target is None
                                 else OptionAssignment(agent_id, "fight", target, world.step))
        for ac in world.team(Team.OPPONENT):
            if self.opp_rng.random() < self.fight_prob:
                target = world.closest(ac.id, world.enemies_of(ac.id))[0].id
                options[ac.id] = OptionAssignment(ac.id, "fight", target, world.step)
            else:
                options[ac.id] = OptionAssignment(ac.id, "escape", None, world.step)

        rewards = {a: [] for a in decisions}
        tau = 0
        while True:
            alive_agents = [a for a in decisions if world.get(a).alive]
            commands = self._low_level_actions(options)
            _, events = advance(world, commands)
            tau += 1
            self.events.extend(events)
            if self.step_hook:
                self.step_hook(world, events)
            for agent_id in alive_agents:
                opt = options[agent_id]
                low = (fight_reward(world, agent_id, events) if opt.policy is PolicyKind.FIGHT
                       else escape_reward(world, agent_id, events))
                first = tau == 1
                high = commander_reward(world, agent_id, CommanderAction(decisions[agent_id][2]), events,
                                        target_id=opt.target_id if first else None,
                                        decision_world=decision_world if first else None)
                rewards[agent_id].append((low, high))
            triggers = detect_events(world, events)
            self.triggers.append(triggers)
            if tau >= self.option_steps or triggers or world.done:
                break

        self.macro_count += 1
        out = []
        episode_over = self.done
        for agent_id, (obs, gobs, choice, logp, value, hidden) in decisions.items():
            alive = world.get(agent_id).alive
            steps = rewards[agent_id]
            total = 0.0
            for low, high in steps:
                total += low.total + high.total
            out.append(MacroTransition(
                agent_id=agent_id, obs=obs, global_obs=gobs, action=choice, log_prob=logp, value=value,
                hidden=hidden, reward=total, duration=len(steps),
                next_obs=build_commander_obs(world, agent_id).features if alive else None,
                done=episode_over or not alive, step_rewards=steps,
            ))
        self.transitions.extend(out)
        return out

    def run(self) -> EpisodeRecord:
        while not self.done:
            self.macro_step()
        return EpisodeRecord(
            seed=self.seed, outcome=classify_outcome(self.world), macro_steps=self.macro_count,
            low_steps=self.world.step, transitions=self.transitions, events=self.events,
            triggers=self.triggers, kinds={ac.id: ac.kind for ac in self.world.aircraft},
            teams={ac.id: ac.team for ac in self.world.aircraft},
        )


def macro_step(episode: HierarchicalEpisode) -> Tuple[WorldState, List[MacroTransition]]:
    return episode.world, episode.macro_step()


def run_hierarchical_episode(scenario: ScenarioConfig, commander: Optional[PolicyGroup], fight: PolicyGroup,
                             escape: PolicyGroup, seed, **kw) -> EpisodeRecord:
    return HierarchicalEpisode(scenario, commander, fight, escape, seed, **kw).run()
