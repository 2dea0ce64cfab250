"""
Evaluation protocol, trajectory recording and static SVG replays.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .commander import HierarchicalEpisode
from .policy_io import PolicyKind
from .rollout import NeuralRole, ScriptedRole, run_lanes
from .scripts import ScriptState
from .sim import DESTRUCTIONS, AircraftKind, CombatEvent, EventKind, ScenarioConfig, Team
from .training import LeagueRegistry, MissingCheckpointError

TRAJECTORY_FORMAT = 1
CHUNK = 50  # episodes per lock-step chunk; fixed so results do not depend on workers


def parse_scenario(label: str) -> tuple:
    """'2v2' / '3vs3' -> (2, 2)."""
    text = label.lower().replace("vs", "v")
    try:
        a, b = text.split("v")
        n, m = int(a), int(b)
    except ValueError:
        raise ValueError(f"scenario must look like NvN, got {label!r}") from None
    if n < 1 or m < 1:
        raise ValueError("team sizes must be at least 1")
    return n, m


@dataclass
class EvaluationReport:
    scenario: str
    episodes: int = 0
    wins: int = 0
    losses: int = 0
    draws: int = 0
    kills: Dict[str, int] = field(default_factory=lambda: {"AC1": 0, "AC2": 0})
    deaths: Dict[str, int] = field(default_factory=lambda: {"AC1": 0, "AC2": 0})
    friendly_kills: Dict[str, int] = field(default_factory=lambda: {"AC1": 0, "AC2": 0})
    boundary_deaths: int = 0
    deaths_by_opponents: int = 0
    deaths_by_friendly: int = 0
    escaped: int = 0
    killed: int = 0
    episodes_with_kills: int = 0
    compositions: List[str] = field(default_factory=list)

    @property
    def win_rate(self) -> float:
        return self.wins / self.episodes if self.episodes else 0.0

    def check(self) -> None:
        if self.wins + self.losses + self.draws != self.episodes:
            raise AssertionError("outcome counts do not partition the episodes")
        total_deaths = sum(self.deaths.values())
        if total_deaths != self.deaths_by_opponents + self.deaths_by_friendly + self.boundary_deaths:
            raise AssertionError("agent deaths do not match their causes")

    def add(self, outcome: str, events: Sequence[CombatEvent], kinds: Dict[int, AircraftKind],
            teams: Dict[int, Team]) -> None:
        self.episodes += 1
        if outcome == "win":
            self.wins += 1
        elif outcome == "loss":
            self.losses += 1
        else:
            self.draws += 1
        agent_died = opp_killed = False
        for ev in events:
            if ev.kind not in DESTRUCTIONS:
                continue
            victim_is_agent = teams[ev.victim] is Team.AGENT
            if victim_is_agent:
                agent_died = True
                self.deaths[kinds[ev.victim].value] += 1
                if ev.kind is EventKind.OUT_OF_BOUNDS:
                    self.boundary_deaths += 1
                elif ev.kind is EventKind.FRIENDLY_KILL:
                    self.deaths_by_friendly += 1
                else:
                    self.deaths_by_opponents += 1
            if ev.kind is EventKind.KILL and teams[ev.shooter] is Team.AGENT:
                self.kills[kinds[ev.shooter].value] += 1
                opp_killed = True
            elif ev.kind is EventKind.FRIENDLY_KILL and teams[ev.shooter] is Team.AGENT:
                self.friendly_kills[kinds[ev.shooter].value] += 1
        self.killed += agent_died
        self.escaped += not agent_died
        self.episodes_with_kills += opp_killed
        comp = "".join(sorted(k.value[-1] for i, k in kinds.items() if teams[i] is Team.AGENT))
        comp += "v" + "".join(sorted(k.value[-1] for i, k in kinds.items() if teams[i] is Team.OPPONENT))
        self.compositions.append(comp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["win_rate"] = self.win_rate
        return d

    def table(self) -> str:
        """Fig-style category counts as aligned text."""
        rows = [
            ("win", self.wins), ("loss", self.losses), ("draw", self.draws),
            ("k-1", self.kills["AC1"]), ("k-2", self.kills["AC2"]),
            ("d-1", self.deaths["AC1"]), ("d-2", self.deaths["AC2"]),
            ("fk-1", self.friendly_kills["AC1"]), ("fk-2", self.friendly_kills["AC2"]),
            ("escaped", self.escaped), ("killed", self.killed), ("kills", self.episodes_with_kills),
        ]
        head = f"{self.scenario}: {self.episodes} episodes"
        return "\n".join([head] + [f"  {name:<8} {value:>6}" for name, value in rows])


# -------------------------------------------------------------- evaluation

@dataclass
class EvalSpec:
    """Who controls each side during evaluation.

    ``agents`` / ``opponents`` are one of: policy, script, random, static.
    ``mode`` picks the agents' network (fight, escape) or the commander.
    """

    mode: str = "fight"
    agents: str = "policy"
    opponents: str = "policy"
    agent_level: int = 5
    opponent_level: int = 4
    horizon: int = 400
    map_size: float = 30.0
    agent_cannon: int = 200
    agent_rockets: int = 5
    opponent_cannon: int = 400
    opponent_rockets: int = 8
    greedy: bool = False
    agent_types: Optional[List[str]] = None
    opponent_types: Optional[List[str]] = None


def commander_spec(**kw) -> EvalSpec:
    """Evaluation settings matching commander training (3vN on a 50 km map)."""
    base = dict(mode="commander", map_size=50.0, horizon=400, agent_cannon=300, agent_rockets=8,
                opponent_cannon=300, opponent_rockets=8)
    base.update(kw)
    return EvalSpec(**base)


def _scripted_or_neural(kind: str, world, rng, group, policy):
    if kind == "policy":
        return NeuralRole(group, policy)
    if kind == "script":
        return ScriptedRole("script", ScriptState(np.random.default_rng(rng.integers(2**63))))
    if kind in ("random", "static"):
        return ScriptedRole(kind)
    raise ValueError(f"unknown controller {kind!r}")


def _needed_groups(spec: EvalSpec, league: Optional[LeagueRegistry]):
    groups = {}
    if spec.mode == "commander":
        if league is None:
            raise MissingCheckpointError("commander evaluation needs a league")
        fight_level = 5 if 5 in league.levels(PolicyKind.FIGHT) else max(league.levels(PolicyKind.FIGHT) or [0])
        groups["fight"] = league.group(PolicyKind.FIGHT, fight_level)
        groups["escape"] = league.group(PolicyKind.ESCAPE, 3)
        if spec.agents == "policy":
            if league.commander is None:
                raise MissingCheckpointError("no commander checkpoint in the league")
            groups["commander"] = league.commander
        return groups
    policy = PolicyKind(spec.mode)
    if spec.agents == "policy":
        if league is None:
            raise MissingCheckpointError("policy agents need a league directory")
        level = 3 if policy is PolicyKind.ESCAPE else spec.agent_level
        groups["agents"] = league.group(policy, level)
    if spec.opponents == "policy":
        if league is None:
            raise MissingCheckpointError("policy opponents need a league directory")
        groups["opponents"] = league.group(PolicyKind.FIGHT, spec.opponent_level)
    return groups


def _scenario(spec: EvalSpec, n: int, m: int) -> ScenarioConfig:
    return ScenarioConfig(
        n_agents=n, n_opponents=m, agent_types=spec.agent_types, opponent_types=spec.opponent_types,
        map_size=spec.map_size, horizon=spec.horizon,
        agent_cannon=spec.agent_cannon, agent_rockets=spec.agent_rockets,
        opponent_cannon=spec.opponent_cannon, opponent_rockets=spec.opponent_rockets,
    )


def _run_chunk(args):
    spec, groups, n, m, seed, episodes = args
    out = []
    if spec.mode == "commander":
        scen = _scenario(spec, n, m)
        for ep in episodes:
            rec = HierarchicalEpisode(scen, groups.get("commander"), groups["fight"], groups["escape"],
                                      (seed, ep), greedy=spec.greedy).run()
            out.append((rec.outcome, rec.events, rec.kinds, rec.teams))
        return out
    policy = PolicyKind(spec.mode)

    def make(world, rng, ep):
        roles = {}
        for ac in world.aircraft:
            if ac.team is Team.AGENT:
                roles[ac.id] = _scripted_or_neural(spec.agents, world, rng, groups.get("agents"), policy)
            else:
                roles[ac.id] = _scripted_or_neural(spec.opponents, world, rng, groups.get("opponents"), PolicyKind.FIGHT)
        return roles, spec.opponents

    results = run_lanes(_scenario(spec, n, m), episodes, seed, make)
    return [(r.outcome, r.events, r.kinds, r.teams) for r in results]


def evaluate(scenario: str, episodes: int = 1000, seed: int = 0, spec: Optional[EvalSpec] = None,
             league: Optional[LeagueRegistry] = None, workers: int = 1) -> EvaluationReport:
    """Play ``episodes`` evaluation episodes and aggregate the outcome counts."""
    spec = spec or EvalSpec()
    n, m = parse_scenario(scenario)
    if spec.mode == "commander" and spec.horizon < 400:
        spec.horizon = 400
    groups = _needed_groups(spec, league)
    chunks = [list(range(s, min(s + CHUNK, episodes))) for s in range(0, episodes, CHUNK)]
    jobs = [(spec, groups, n, m, seed, c) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    report = EvaluationReport(scenario=f"{n}v{m}")
    for part in parts:
        for outcome, events, kinds, teams in part:
            report.add(outcome, events, kinds, teams)
    report.check()
    return report


# -------------------------------------------------------------- trajectories

def _aircraft_record(ac) -> dict:
    return {
        "id": ac.id, "team": ac.team.value, "kind": ac.kind.value,
        "x": ac.pose.x, "y": ac.pose.y, "heading": ac.pose.heading, "speed": ac.speed,
        "alive": ac.alive, "cannon": ac.cannon_remaining, "rockets": ac.rockets_remaining,
    }


class TrajectoryRecorder:
    """Collects per-step records; usable as a ``step_hook``."""

    def __init__(self, metadata: Optional[dict] = None):
        self.metadata = dict(metadata or {})
        self.header: Optional[dict] = None
        self.records: List[dict] = []

    def __call__(self, *args):
        world, events = args[-2], args[-1]
        if self.header is None:
            self.header = {
                "type": "header", "format": TRAJECTORY_FORMAT, "map_size": world.map_size,
                "aircraft": [_aircraft_record(ac) for ac in world.aircraft], **self.metadata,
            }
            return
        self.records.append({
            "type": "step", "step": world.step,
            "aircraft": [_aircraft_record(ac) for ac in world.aircraft],
            "events": [ev.to_dict() for ev in events],
        })
        for ev in events:
            if ev.kind in DESTRUCTIONS:
                v = world.get(ev.victim)
                self.records.append({"type": "landmark", "step": world.step, "id": v.id,
                                     "x": v.pose.x, "y": v.pose.y, "cause": ev.kind.value})

    def lines(self) -> List[str]:
        return [json.dumps(r, sort_keys=True) for r in [self.header] + self.records]

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")
        return path


def record_trajectory(scenario: str, seed: int, path, spec: Optional[EvalSpec] = None,
                      league: Optional[LeagueRegistry] = None, episode: int = 0) -> Path:
    """Play one evaluation episode and write its JSON-lines trajectory."""
    spec = spec or EvalSpec()
    n, m = parse_scenario(scenario)
    groups = _needed_groups(spec, league)
    rec = TrajectoryRecorder({"seed": seed, "episode": episode, "scenario": f"{n}v{m}", "mode": spec.mode,
                              "agents": spec.agents, "opponents": spec.opponents,
                              "versions": {k: str(g.version) for k, g in sorted(groups.items())}})
    if spec.mode == "commander":
        HierarchicalEpisode(_scenario(spec, n, m), groups.get("commander"), groups["fight"], groups["escape"],
                            (seed, episode), greedy=spec.greedy, step_hook=rec).run()
    else:
        policy = PolicyKind(spec.mode)

        def make(world, rng, ep):
            roles = {}
            for ac in world.aircraft:
                side = spec.agents if ac.team is Team.AGENT else spec.opponents
                group = groups.get("agents" if ac.team is Team.AGENT else "opponents")
                roles[ac.id] = _scripted_or_neural(side, world, rng, group,
                                                   policy if ac.team is Team.AGENT else PolicyKind.FIGHT)
            return roles, spec.opponents

        run_lanes(_scenario(spec, n, m), [episode], seed, make, step_hook=rec)
    return rec.write(path)


class MalformedLogError(ValueError):
    pass


def read_trajectory(path) -> dict:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise MalformedLogError(f"{path}: {exc}") from None
    if not records or records[0].get("type") != "header":
        raise MalformedLogError(f"{path}: missing header record")
    header = records[0]
    if header.get("format") != TRAJECTORY_FORMAT:
        raise MalformedLogError(f"{path}: unsupported format {header.get('format')!r}")
    for key in ("map_size", "aircraft"):
        if key not in header:
            raise MalformedLogError(f"{path}: header lacks {key!r}")
    steps = [r for r in records[1:] if r.get("type") == "step"]
    landmarks = [r for r in records[1:] if r.get("type") == "landmark"]
    return {"header": header, "steps": steps, "landmarks": landmarks}


def replay_events(log: dict) -> List[CombatEvent]:
    return [CombatEvent.from_dict(e) for s in log["steps"] for e in s["events"]]


# ------------------------------------------------------------------- render

TEAM_COLORS = {"agent": "#1f5fbf", "opponent": "#c0392b"}
CANVAS = 600.0


def render_replay(log, out_path=None) -> str:
    """Static SVG of a trajectory log: tracks, destruction marks, map border."""
    if not isinstance(log, dict):
        log = read_trajectory(log)
    header = log["header"]
    size = float(header["map_size"])
    if size <= 0:
        raise MalformedLogError("map_size must be positive")
    k = CANVAS / size

    def px(x, y):
        return f"{x * k:.3f},{(size - y) * k:.3f}"

    tracks: Dict[int, List[tuple]] = {}
    teams: Dict[int, str] = {}
    for ac in header["aircraft"]:
        tracks[ac["id"]] = [(ac["x"], ac["y"])]
        teams[ac["id"]] = ac["team"]
    for step in log["steps"]:
        for ac in step["aircraft"]:
            track = tracks.setdefault(ac["id"], [])
            teams.setdefault(ac["id"], ac["team"])
            if not track or track[-1] != (ac["x"], ac["y"]):
                track.append((ac["x"], ac["y"]))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS:.0f}" height="{CANVAS:.0f}" '
        f'viewBox="0 0 {CANVAS:.0f} {CANVAS:.0f}">',
        f'<rect x="0" y="0" width="{CANVAS:.0f}" height="{CANVAS:.0f}" fill="white" stroke="black" stroke-width="2"/>',
    ]
    if log["steps"]:
        for ac_id in sorted(tracks):
            pts = tracks[ac_id]
            if len(pts) < 2:
                continue
            color = TEAM_COLORS.get(teams[ac_id], "#555555")
            parts.append(f'<polyline id="track-{ac_id}" fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{" ".join(px(x, y) for x, y in pts)}"/>')
    for mark in log["landmarks"]:
        cx, cy = mark["x"] * k, (size - mark["y"]) * k
        color = TEAM_COLORS.get(teams.get(mark["id"], ""), "#555555")
        parts.append(f'<g id="landmark-{mark["id"]}" stroke="{color}" stroke-width="2">'
                     f'<line x1="{cx - 5:.3f}" y1="{cy - 5:.3f}" x2="{cx + 5:.3f}" y2="{cy + 5:.3f}"/>'
                     f'<line x1="{cx - 5:.3f}" y1="{cy + 5:.3f}" x2="{cx + 5:.3f}" y2="{cy - 5:.3f}"/></g>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if out_path is not None:
        Path(out_path).write_text(svg)
    return svg
