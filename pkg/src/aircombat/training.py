"""
PPO training: rollout buffer, advantage estimation, clipped updates, the
five-level curriculum with a checkpoint league, and commander training on
top of frozen low-level policies.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .nets import (
    CLIP_EPS, ENTROPY_COEF, VALUE_COEF, NonFiniteLossError, PolicyGroup, Version,
    clone_group, init_group, load_group, ppo_loss, save_group,
)
from .policy_io import PolicyKind
from .rollout import NeuralRole, ScriptedRole, Transition, run_lanes
from .scripts import ScriptState
from .sim import AircraftKind, ScenarioConfig, Team

log = logging.getLogger(__name__)

GAMMA = 0.95
GAE_LAMBDA = 0.95
LEVELS = (1, 2, 3, 4, 5)
ESCAPE_LEVEL = 3


class MissingCheckpointError(LookupError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    levels: List[int] = field(default_factory=lambda: list(LEVELS))
    episodes_per_level: int = 10_000
    level_episodes: Dict[str, int] = field(default_factory=dict)  # per-level override, keys "1".."5"
    commander_episodes: int = 5_000
    batch_size: int = 2_000
    commander_batch_size: int = 1_000
    lr: float = 1e-4
    gamma: float = GAMMA
    gae_lambda: float = GAE_LAMBDA
    clip_eps: float = CLIP_EPS
    epochs: int = 10
    minibatch_size: int = 256
    value_coef: float = VALUE_COEF
    entropy_coef: float = ENTROPY_COEF
    max_grad_norm: float = 0.5
    n_envs: int = 16
    n_agents: int = 2
    n_opponents: int = 2
    agent_types: Optional[List[str]] = None
    opponent_types: Optional[List[str]] = None
    train_kinds: Optional[List[str]] = None  # default: every kind present
    map_size: float = 30.0
    commander_map_size: float = 50.0
    base_horizon: int = 200
    horizon_step: int = 50
    agent_cannon: int = 200
    agent_rockets: int = 5
    opponent_cannon: int = 400
    opponent_rockets: int = 8
    commander_cannon: int = 300
    commander_rockets: int = 8
    commander_fight_prob: float = 0.8
    macro_horizon: int = 40
    option_steps: int = 10
    embed_dim: int = 100
    attention_dim: int = 64
    recurrent_hidden: int = 128

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def episodes_for(self, level: int) -> int:
        return int(self.level_episodes.get(str(level), self.episodes_per_level))

    @property
    def net_kwargs(self) -> dict:
        return {"embed_dim": self.embed_dim, "attention_dim": self.attention_dim,
                "recurrent_hidden": self.recurrent_hidden}


def level_horizon(level: int, base: int = 200, step: int = 50) -> int:
    return base + step * (level - 1)


@dataclass(frozen=True)
class CurriculumLevel:
    index: int
    opponent_source: str  # static | random | script | frozen_policy | league
    horizon: int

    @classmethod
    def make(cls, index: int, cfg: Optional[TrainConfig] = None) -> "CurriculumLevel":
        if index not in LEVELS:
            raise ValueError(f"curriculum level must be 1..5, got {index}")
        source = {1: "static", 2: "random", 3: "script", 4: "frozen_policy", 5: "league"}[index]
        base, step = (cfg.base_horizon, cfg.horizon_step) if cfg else (200, 50)
        return cls(index, source, level_horizon(index, base, step))


# ------------------------------------------------------------------ league

class LeagueRegistry:
    """Frozen checkpoints keyed by (policy, aircraft kind, level)."""

    def __init__(self):
        self._groups: Dict[Tuple[PolicyKind, int], PolicyGroup] = {}
        self.commander: Optional[PolicyGroup] = None

    def add(self, group: PolicyGroup, level: int) -> None:
        self._groups[(group.policy, level)] = clone_group(group)

    def has(self, policy: PolicyKind, kind: AircraftKind, level: int) -> bool:
        g = self._groups.get((PolicyKind(policy), level))
        return g is not None and AircraftKind(kind) in g

    def group(self, policy: PolicyKind, level: int) -> PolicyGroup:
        try:
            return self._groups[(PolicyKind(policy), level)]
        except KeyError:
            raise MissingCheckpointError(f"no {PolicyKind(policy).value} checkpoint for L{level}") from None

    def get(self, policy: PolicyKind, kind: AircraftKind, level: int):
        return self.group(policy, level)[AircraftKind(kind)]

    def keys(self) -> List[Tuple[str, str, int]]:
        out = []
        for (policy, level), g in sorted(self._groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            for kind in sorted(g, key=lambda k: k.value):
                out.append((policy.value, kind.value, level))
        return out

    def levels(self, policy: PolicyKind) -> List[int]:
        return sorted(level for (p, level) in self._groups if p is PolicyKind(policy))

    def require(self, policy: PolicyKind, levels: Iterable[int]) -> None:
        for level in levels:
            self.group(policy, level)

    def save(self, root) -> None:
        for (policy, level), g in self._groups.items():
            save_group(g, root, level)
        if self.commander is not None:
            save_group(self.commander, root, 0)

    @classmethod
    def load(cls, root) -> "LeagueRegistry":
        """Load the newest version of every checkpoint under ``root``."""
        root = Path(root)
        if not root.is_dir():
            raise MissingCheckpointError(f"league directory {root} does not exist")
        reg = cls()
        for policy in (PolicyKind.FIGHT, PolicyKind.ESCAPE):
            levels = set()
            for kind_dir in (root / policy.value).glob("*"):
                levels.update(int(p.name[1:]) for p in kind_dir.glob("L*"))
            for level in sorted(levels):
                paths = {}
                for kind in AircraftKind:
                    versions = sorted((root / policy.value / kind.value.lower() / f"L{level}").glob("L*"))
                    if versions:
                        paths[kind] = versions[-1]
                if len(paths) == 2:
                    reg._groups[(policy, level)] = load_group(policy, paths)
        cmd = sorted((root / "commander" / "any" / "L0").glob("L*"))
        if cmd:
            reg.commander = load_group(PolicyKind.COMMANDER, {None: cmd[-1]})
        return reg


# ------------------------------------------------------------------ buffer

class RolloutBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.transitions: List[Transition] = []

    def add_trajectory(self, traj: Sequence[Transition]) -> None:
        if traj and not traj[-1].done:
            raise ValueError("trajectories must end on a done transition")
        self.transitions.extend(traj)

    def __len__(self):
        return len(self.transitions)

    @property
    def full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def clear(self) -> None:
        self.transitions = []


def compute_gae(rewards, values, dones, gamma: float = GAMMA, lam: float = GAE_LAMBDA):
    """Generalized advantage estimates with episode-boundary truncation.

    Each segment must end with ``done``; the value after a done step is 0.
    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    next_value = 0.0
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_value = 0.0
            next_adv = 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        next_adv = delta + gamma * lam * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def buffer_gae(buffer: RolloutBuffer, gamma: float = GAMMA, lam: float = GAE_LAMBDA):
    tr = buffer.transitions
    return compute_gae([t.reward for t in tr], [t.value for t in tr], [t.done for t in tr], gamma, lam)


def _batch_tensors(transitions: Sequence[Transition], idx) -> Dict[str, torch.Tensor]:
    batch = {
        "obs": torch.as_tensor(np.stack([transitions[i].obs for i in idx])),
        "global_obs": torch.as_tensor(np.stack([transitions[i].global_obs for i in idx])),
        "actions": torch.as_tensor(np.array([transitions[i].action for i in idx], dtype=np.int64)),
    }
    if transitions[idx[0]].hidden is not None:
        batch["hidden"] = torch.as_tensor(np.stack([transitions[i].hidden for i in idx]))
    return batch


def ppo_update(group: PolicyGroup, buffer: RolloutBuffer, optimizer: torch.optim.Optimizer,
               cfg: TrainConfig, rng: np.random.Generator, batch_size_key: str = "minibatch_size") -> Dict[str, float]:
    """K epochs of clipped PPO over the buffer, then empty it.

    Transitions are split by aircraft kind; minibatches of both kinds are
    interleaved so the shared layer sees both.
    """
    if not len(buffer):
        return {}
    adv_all, ret_all = buffer_gae(buffer, cfg.gamma, cfg.gae_lambda)
    tr = buffer.transitions
    by_kind: Dict = {}
    for i, t in enumerate(tr):
        by_kind.setdefault(t.kind, []).append(i)

    prepared = {}
    for kind, idx in by_kind.items():
        idx = np.array(idx)
        adv = adv_all[idx]
        if len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        prepared[kind] = {
            "idx": idx,
            "adv": torch.as_tensor(adv),
            "ret": torch.as_tensor(ret_all[idx]),
            "old": torch.as_tensor(np.array([tr[i].log_prob for i in idx])),
        }

    params = group.unique_parameters()
    stats_acc: Dict[str, List[float]] = {}
    mb = getattr(cfg, batch_size_key)
    kinds = sorted(prepared, key=lambda k: "" if k is None else k.value)
    for _ in range(cfg.epochs):
        plan = []
        for kind in kinds:
            n = len(prepared[kind]["idx"])
            perm = rng.permutation(n)
            for start in range(0, n, mb):
                plan.append((kind, perm[start:start + mb]))
        order = rng.permutation(len(plan))
        for j in order:
            kind, local = plan[j]
            p = prepared[kind]
            batch = _batch_tensors(tr, p["idx"][local])
            loss, stats = ppo_loss(group[kind], batch, p["old"][local], p["adv"][local], p["ret"][local],
                                   cfg.clip_eps, cfg.value_coef, cfg.entropy_coef)
            optimizer.zero_grad()
            loss.backward()
            for prm in params:
                if prm.grad is not None and not torch.all(torch.isfinite(prm.grad)):
                    raise NonFiniteLossError("non-finite gradient during PPO update")
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                stats_acc.setdefault(k, []).append(v)
    buffer.clear()
    return {k: float(np.mean(v)) for k, v in stats_acc.items()}


def make_optimizer(group: PolicyGroup, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(group.unique_parameters(), lr=lr)


# --------------------------------------------------------------- low level

class ProgressLog:
    """JSON-lines progress log, started fresh on creation (no-op without a path)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def low_level_scenario(cfg: TrainConfig, level: int) -> ScenarioConfig:
    return ScenarioConfig(
        n_agents=cfg.n_agents, n_opponents=cfg.n_opponents,
        agent_types=cfg.agent_types, opponent_types=cfg.opponent_types,
        map_size=cfg.map_size, horizon=CurriculumLevel.make(level, cfg).horizon,
        agent_cannon=cfg.agent_cannon, agent_rockets=cfg.agent_rockets,
        opponent_cannon=cfg.opponent_cannon, opponent_rockets=cfg.opponent_rockets,
    )


LEAGUE_SOURCES = ("static", "random", "script", "L3", "L4")


def opponent_roles(world, rng: np.random.Generator, source: str, league: Optional[LeagueRegistry]):
    """Roles for every opponent under one curriculum opponent source."""
    roles = {}
    for ac in world.team(Team.OPPONENT, alive_only=False):
        if source in ("static", "random"):
            roles[ac.id] = ScriptedRole(source)
        elif source == "script":
            roles[ac.id] = ScriptedRole("script", ScriptState(np.random.default_rng(rng.integers(2**63))))
        elif source in ("L3", "L4"):
            roles[ac.id] = NeuralRole(league.group(PolicyKind.FIGHT, int(source[1])), PolicyKind.FIGHT)
        else:
            raise ValueError(f"unknown opponent source {source!r}")
    return roles


def level_source(level: int) -> str:
    return {1: "static", 2: "random", 3: "script", 4: "L3"}.get(level, "league")


class LowLevelTrainer:
    """Trains one policy type (fight or escape) for both aircraft kinds."""

    def __init__(self, policy: PolicyKind, cfg: TrainConfig, league: Optional[LeagueRegistry] = None,
                 group: Optional[PolicyGroup] = None, progress: Optional[ProgressLog] = None):
        self.policy = PolicyKind(policy)
        if self.policy is PolicyKind.COMMANDER:
            raise ValueError("use CommanderTrainer for the commander")
        self.cfg = cfg
        self.league = league if league is not None else LeagueRegistry()
        self.group = group if group is not None else init_group(self.policy, cfg.seed, **cfg.net_kwargs)
        self.optimizer = make_optimizer(self.group, cfg.lr)
        self.buffer = RolloutBuffer(cfg.batch_size)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        self.progress = progress or ProgressLog()
        self.train_kinds = (None if cfg.train_kinds is None
                            else {AircraftKind(str(k).upper()) for k in cfg.train_kinds})
        self.iteration = 0
        self.episode_returns: List[float] = []
        self.update_stats: List[Dict[str, float]] = []
        self.episode_counter = 0

    def _roles_factory(self, level: int):
        source = level_source(level)
        if source == "L3":
            self.league.require(PolicyKind.FIGHT, [3])
        if source == "league":
            self.league.require(PolicyKind.FIGHT, [1, 2, 3, 4])

        def make(world, rng, ep):
            src = LEAGUE_SOURCES[int(rng.integers(len(LEAGUE_SOURCES)))] if source == "league" else source
            roles = opponent_roles(world, rng, src, self.league)
            for ac in world.team(Team.AGENT, alive_only=False):
                record = self.train_kinds is None or ac.kind in self.train_kinds
                roles[ac.id] = NeuralRole(self.group, self.policy, record=record)
            return roles, src
        return make

    def collect_rollouts(self, level: int, episodes: Sequence[int]):
        """Play ``episodes`` and pool every learner trajectory into the buffer."""
        scenario = low_level_scenario(self.cfg, level)
        return run_lanes(scenario, episodes, self.cfg.seed, self._roles_factory(level),
                         on_transitions=self.buffer.add_trajectory)

    def train_level(self, level: int, n_episodes: Optional[int] = None) -> List[float]:
        CurriculumLevel.make(level, self.cfg)
        n_episodes = self.cfg.episodes_for(level) if n_episodes is None else n_episodes
        counts = {"win": 0, "loss": 0, "draw": 0}
        returns = []
        done = 0
        while done < n_episodes:
            n = min(self.cfg.n_envs, n_episodes - done)
            eps = list(range(self.episode_counter, self.episode_counter + n))
            results = self.collect_rollouts(level, eps)
            self.episode_counter += n
            done += n
            for r in results:
                counts[r.outcome] += 1
                returns.append(r.agent_return)
                self.progress.write({
                    "kind": "episode", "policy": self.policy.value, "level": level, "episode": r.episode,
                    "mean_reward": r.agent_return, "outcome": r.outcome, "opponents": r.opponent_source,
                    "wins": counts["win"], "losses": counts["loss"], "draws": counts["draw"],
                })
            if self.buffer.full:
                self.iteration += 1
                n_tr = len(self.buffer)
                stats = ppo_update(self.group, self.buffer, self.optimizer, self.cfg, self.rng)
                self.group.set_version(Version(level, self.iteration))
                self.update_stats.append(stats)
                self.progress.write({"kind": "update", "policy": self.policy.value, "level": level,
                                     "iteration": self.iteration, "transitions": n_tr, **stats})
        self.episode_returns.extend(returns)
        self.group.set_version(Version(level, self.iteration))
        return returns


def run_curriculum(policy: PolicyKind, cfg: TrainConfig, levels: Optional[Sequence[int]] = None,
                   league: Optional[LeagueRegistry] = None, progress: Optional[ProgressLog] = None,
                   trainer: Optional[LowLevelTrainer] = None) -> LeagueRegistry:
    """Train level by level, checkpointing each into the league.

    Escape policies only train at L3.
    """
    policy = PolicyKind(policy)
    league = league if league is not None else LeagueRegistry()
    if policy is PolicyKind.ESCAPE:
        levels = [ESCAPE_LEVEL]
    else:
        levels = list(cfg.levels if levels is None else levels)
    if list(levels) != sorted(levels):
        raise ValueError("curriculum levels must be in increasing order")
    trainer = trainer or LowLevelTrainer(policy, cfg, league, progress=progress)
    for level in levels:
        log.info("training %s at L%d", policy.value, level)
        trainer.train_level(level)
        league.add(trainer.group, level)
    return league


# --------------------------------------------------------------- commander

def commander_scenario(cfg: TrainConfig, n: int = 3) -> ScenarioConfig:
    return ScenarioConfig(
        n_agents=n, n_opponents=n, map_size=cfg.commander_map_size,
        horizon=cfg.macro_horizon * cfg.option_steps,
        agent_cannon=cfg.commander_cannon, agent_rockets=cfg.commander_rockets,
        opponent_cannon=cfg.commander_cannon, opponent_rockets=cfg.commander_rockets,
    )


def low_level_for_commander(league: LeagueRegistry) -> Tuple[PolicyGroup, PolicyGroup]:
    """The frozen options: newest fight checkpoint (L5 expected) and escape L3."""
    league.require(PolicyKind.ESCAPE, [ESCAPE_LEVEL])
    fight_levels = league.levels(PolicyKind.FIGHT)
    if 5 not in fight_levels:
        raise MissingCheckpointError("commander training needs the L5 fight checkpoint")
    return league.group(PolicyKind.FIGHT, 5), league.group(PolicyKind.ESCAPE, ESCAPE_LEVEL)


class CommanderTrainer:
    def __init__(self, league: LeagueRegistry, cfg: TrainConfig, progress: Optional[ProgressLog] = None,
                 fight: Optional[PolicyGroup] = None, escape: Optional[PolicyGroup] = None):
        from .commander import HierarchicalEpisode  # local: commander imports rollout helpers
        self._episode_cls = HierarchicalEpisode
        self.cfg = cfg
        self.league = league
        if fight is None or escape is None:
            fight, escape = low_level_for_commander(league)
        self.fight, self.escape = fight, escape
        for group in (fight, escape):
            for p in group.unique_parameters():
                p.requires_grad_(False)
        self.group = init_group(PolicyKind.COMMANDER, cfg.seed, **cfg.net_kwargs)
        self.optimizer = make_optimizer(self.group, cfg.lr)
        self.buffer = RolloutBuffer(cfg.commander_batch_size)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DE]))
        self.progress = progress or ProgressLog()
        self.iteration = 0
        self.episode_returns: List[float] = []

    def run_episode(self, episode: int):
        ep = self._episode_cls(
            commander_scenario(self.cfg), self.group, self.fight, self.escape, (self.cfg.seed, episode),
            fight_prob=self.cfg.commander_fight_prob, macro_horizon=self.cfg.macro_horizon,
            option_steps=self.cfg.option_steps, record_values=True,
        )
        record = ep.run()
        per_agent: Dict[int, List[Transition]] = {}
        for m in record.transitions:
            per_agent.setdefault(m.agent_id, []).append(Transition(
                obs=m.obs, global_obs=m.global_obs, action=(m.action,), log_prob=m.log_prob,
                reward=m.reward, done=m.done, value=m.value, hidden=m.hidden,
                agent_id=m.agent_id, kind=None, episode=episode,
            ))
        for agent_id in sorted(per_agent):
            traj = per_agent[agent_id]
            traj[-1].done = True
            self.buffer.add_trajectory(traj)
        n_agents = len(per_agent) or 1
        ret = sum(m.reward for m in record.transitions) / n_agents
        return record, ret

    def train(self, n_episodes: Optional[int] = None) -> PolicyGroup:
        n_episodes = self.cfg.commander_episodes if n_episodes is None else n_episodes
        counts = {"win": 0, "loss": 0, "draw": 0}
        for episode in range(n_episodes):
            record, ret = self.run_episode(episode)
            counts[record.outcome] += 1
            self.episode_returns.append(ret)
            self.progress.write({
                "kind": "episode", "policy": "commander", "level": 0, "episode": episode,
                "mean_reward": ret, "outcome": record.outcome,
                "wins": counts["win"], "losses": counts["loss"], "draws": counts["draw"],
            })
            if self.buffer.full:
                self.iteration += 1
                n_tr = len(self.buffer)
                stats = ppo_update(self.group, self.buffer, self.optimizer, self.cfg, self.rng)
                self.group.set_version(Version(0, self.iteration))
                self.progress.write({"kind": "update", "policy": "commander", "iteration": self.iteration,
                                     "transitions": n_tr, **stats})
        self.group.set_version(Version(0, self.iteration))
        return self.group


def train_commander(league: LeagueRegistry, cfg: TrainConfig, episodes: Optional[int] = None,
                    progress: Optional[ProgressLog] = None) -> PolicyGroup:
    trainer = CommanderTrainer(league, cfg, progress)
    group = trainer.train(episodes)
    league.commander = clone_group(group)
    return group
