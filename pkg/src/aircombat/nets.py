"""
Actor-critic networks for the fight, escape and commander policies.

Fight networks embed each entity block (own aircraft, opponent, friendly)
as a token and mix the tokens with single-head self-attention. Escape
networks are plain feed-forward. The commander carries a GRU state between
decisions. Every network ends in a 100-unit tanh layer that is shared
between actor and critic, and between the AC1 and AC2 instances of the same
policy.
"""

import json
import math
from dataclasses import asdict, dataclass
from functools import total_ordering
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .policy_io import (
    COMMANDER_HEAD_SIZES, GLOBAL_OBS_DIM, HEAD_SIZES, MAX_TEAM, SLOT_LEN,
    ObservationVector, PolicyKind, block_sizes,
)
from .sim import AircraftKind

DTYPE = torch.float64
TRUNKS = {PolicyKind.FIGHT: "self_attention", PolicyKind.ESCAPE: "plain", PolicyKind.COMMANDER: "recurrent"}
HEAD_INIT_SCALE = 0.01


@dataclass
class NetworkConfig:
    policy: PolicyKind
    kind: Optional[AircraftKind] = None
    embed_dim: int = 100
    attention_dim: int = 64
    recurrent_hidden: int = 128

    def __post_init__(self):
        self.policy = PolicyKind(self.policy)
        if self.policy is PolicyKind.COMMANDER:
            self.kind = None
        elif self.kind is None:
            raise ValueError(f"{self.policy.value} networks need an aircraft kind")
        else:
            self.kind = AircraftKind(self.kind)

    @property
    def trunk(self) -> str:
        return TRUNKS[self.policy]

    @property
    def block_sizes(self) -> Tuple[int, ...]:
        return block_sizes(self.policy, self.kind)

    @property
    def obs_dim(self) -> int:
        return sum(self.block_sizes)

    @property
    def head_sizes(self) -> Tuple[int, ...]:
        if self.policy is PolicyKind.COMMANDER:
            return COMMANDER_HEAD_SIZES
        return HEAD_SIZES[self.kind]

    @property
    def critic_input_dim(self) -> int:
        return GLOBAL_OBS_DIM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.value
        d["kind"] = self.kind.value if self.kind else None
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return cls(**d)


@total_ordering
@dataclass(frozen=True)
class Version:
    level: int
    iteration: int

    def __lt__(self, other):
        return (self.level, self.iteration) < (other.level, other.iteration)

    def __str__(self):
        return f"L{self.level}-{self.iteration:06d}"


def _linear(n_in: int, n_out: int, gen: torch.Generator, scale: float = 1.0) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=DTYPE)
    bound = scale * math.sqrt(6.0 / (n_in + n_out))
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()
    return layer


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over entity tokens, mean-pooled."""

    def __init__(self, dim: int, attn_dim: int, gen: torch.Generator):
        super().__init__()
        self.q = _linear(dim, attn_dim, gen)
        self.k = _linear(dim, attn_dim, gen)
        self.v = _linear(dim, attn_dim, gen)
        self.out = _linear(attn_dim, dim, gen)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: [B, T, D]
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        weights = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        mixed = torch.tanh(self.out(weights @ v))
        return mixed.mean(dim=1)


class ActorCritic(nn.Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, shared: Optional[nn.Linear] = None):
        super().__init__()
        self.cfg = cfg
        self.version = Version(0, 0)
        gen = torch.Generator().manual_seed(int(seed))
        E = cfg.embed_dim
        if cfg.trunk == "self_attention":
            self.embed = nn.ModuleList(_linear(n, E, gen) for n in cfg.block_sizes)
            self.attention = SelfAttention(E, cfg.attention_dim, gen)
        else:
            self.embed = _linear(cfg.obs_dim, E, gen)
        if cfg.trunk == "recurrent":
            self.gru = nn.GRUCell(E, cfg.recurrent_hidden, dtype=DTYPE)
            bound = 1.0 / math.sqrt(cfg.recurrent_hidden)
            with torch.no_grad():
                for p in self.gru.parameters():
                    p.uniform_(-bound, bound, generator=gen)
            self.post_gru = _linear(cfg.recurrent_hidden, E, gen)
        self.shared = shared if shared is not None else _linear(E, E, gen)
        self.heads = nn.ModuleList(_linear(E, n, gen, HEAD_INIT_SCALE) for n in cfg.head_sizes)
        self.critic_embed = _linear(cfg.critic_input_dim, E, gen)
        self.value_head = _linear(E, 1, gen)
        self._slices = []
        start = 0
        for n in cfg.block_sizes:
            self._slices.append(slice(start, start + n))
            start += n

    @property
    def recurrent(self) -> bool:
        return self.cfg.trunk == "recurrent"

    def initial_state(self, batch: int = 1) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.recurrent_hidden, dtype=DTYPE)

    def features(self, obs: torch.Tensor, hidden: Optional[torch.Tensor] = None):
        """Observation -> pre-shared-layer features (and next hidden state)."""
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation length {obs.shape[-1]} != {self.cfg.obs_dim}")
        new_hidden = None
        if self.cfg.trunk == "self_attention":
            tokens = torch.stack([torch.tanh(emb(obs[:, s])) for emb, s in zip(self.embed, self._slices)], dim=1)
            x = self.attention(tokens)
        else:
            x = torch.tanh(self.embed(obs))
        if self.recurrent:
            if hidden is None:
                raise ValueError("recurrent trunk needs a hidden state")
            new_hidden = self.gru(x, hidden)
            x = torch.tanh(self.post_gru(new_hidden))
        elif hidden is not None:
            raise ValueError("hidden state given to a non-recurrent trunk")
        return x, new_hidden

    def logits(self, feats: torch.Tensor) -> List[torch.Tensor]:
        z = torch.tanh(self.shared(feats))
        return [head(z) for head in self.heads]

    def value(self, feats: torch.Tensor, global_obs: torch.Tensor) -> torch.Tensor:
        if global_obs.shape[-1] != self.cfg.critic_input_dim:
            raise ValueError(f"critic input length {global_obs.shape[-1]} != {self.cfg.critic_input_dim}")
        n_slots = 2 * MAX_TEAM
        slots = global_obs[:, : n_slots * SLOT_LEN].reshape(-1, n_slots, SLOT_LEN)
        mask = global_obs[:, n_slots * SLOT_LEN:]
        masked = torch.cat([(slots * mask.unsqueeze(-1)).flatten(1), mask], dim=1)
        g = torch.tanh(self.critic_embed(masked))
        z = torch.tanh(self.shared(feats + g))
        return self.value_head(z).squeeze(-1)

    def forward(self, obs, global_obs, hidden=None):
        feats, new_hidden = self.features(obs, hidden)
        return self.logits(feats), self.value(feats, global_obs), new_hidden


class PolicyGroup(dict):
    """Networks of one policy type keyed by aircraft kind (commander: key None)."""

    def __init__(self, policy: PolicyKind, nets: Dict):
        super().__init__(nets)
        self.policy = PolicyKind(policy)

    def unique_parameters(self) -> List[nn.Parameter]:
        seen, out = set(), []
        for key in sorted(self, key=lambda k: "" if k is None else k.value):
            for p in self[key].parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def set_version(self, version: Version) -> None:
        for net in self.values():
            net.version = version

    @property
    def version(self) -> Version:
        return next(iter(self.values())).version

    def clone(self) -> "PolicyGroup":
        return clone_group(self)


def init_params(cfg: NetworkConfig, seed: int = 0, shared: Optional[nn.Linear] = None) -> ActorCritic:
    return ActorCritic(cfg, seed, shared)


def init_group(policy: PolicyKind, seed: int = 0, **net_kw) -> PolicyGroup:
    """AC1 and AC2 networks for ``policy`` sharing their hidden layer."""
    policy = PolicyKind(policy)
    if policy is PolicyKind.COMMANDER:
        return PolicyGroup(policy, {None: ActorCritic(NetworkConfig(policy, None, **net_kw), seed)})
    ac1 = ActorCritic(NetworkConfig(policy, AircraftKind.AC1, **net_kw), seed)
    ac2 = ActorCritic(NetworkConfig(policy, AircraftKind.AC2, **net_kw), seed + 1, shared=ac1.shared)
    return PolicyGroup(policy, {AircraftKind.AC1: ac1, AircraftKind.AC2: ac2})


def clone_group(group: PolicyGroup) -> PolicyGroup:
    """Deep copy preserving the shared-layer aliasing."""
    any_net = next(iter(group.values()))
    net_kw = {k: v for k, v in any_net.cfg.to_dict().items() if k not in ("policy", "kind")}
    out = init_group(group.policy, 0, **net_kw)
    for key, net in group.items():
        out[key].load_state_dict(net.state_dict())
        out[key].version = net.version
    return out


# ------------------------------------------------------------ distributions

@dataclass
class ActionDistribution:
    probs: List[np.ndarray]

    def __post_init__(self):
        for p in self.probs:
            if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
                raise ValueError("head probabilities must be non-negative and sum to 1")


def _as_batch(obs) -> torch.Tensor:
    if isinstance(obs, ObservationVector):
        obs = obs.features
    t = torch.as_tensor(np.asarray(obs, dtype=np.float64))
    return t.unsqueeze(0) if t.dim() == 1 else t


@torch.no_grad()
def forward_actor(obs, params: ActorCritic, rnn: Optional[torch.Tensor] = None):
    """Action distribution for a single observation (and the next GRU state)."""
    if params.recurrent and rnn is None:
        raise ValueError("recurrent trunk needs a hidden state")
    x = _as_batch(obs)
    h = None if rnn is None else rnn.reshape(1, -1)
    feats, new_h = params.features(x, h)
    probs = [torch.softmax(l, dim=-1)[0].numpy().copy() for l in params.logits(feats)]
    return ActionDistribution(probs), new_h


@torch.no_grad()
def forward_critic(global_obs, params: ActorCritic, obs, rnn: Optional[torch.Tensor] = None) -> float:
    feats, _ = params.features(_as_batch(obs), None if rnn is None else rnn.reshape(1, -1))
    return float(params.value(feats, _as_batch(global_obs))[0])


def sample_index(p: np.ndarray, u: float) -> int:
    """Inverse-CDF categorical draw for a uniform ``u`` in [0, 1)."""
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    # guard against cumulative round-off below 1
    idx = min(idx, len(p) - 1)
    while p[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> Tuple[Tuple[int, ...], float]:
    indices, log_prob = [], 0.0
    for p in dist.probs:
        i = sample_index(p, rng.random())
        indices.append(i)
        log_prob += math.log(p[i])
    return tuple(indices), log_prob


def batch_log_probs(logits: Sequence[torch.Tensor], actions: torch.Tensor):
    """Joint log-probability and summed entropy of multi-discrete actions."""
    logp = 0.0
    entropy = 0.0
    for k, l in enumerate(logits):
        lsm = torch.log_softmax(l, dim=-1)
        logp = logp + lsm.gather(1, actions[:, k:k + 1]).squeeze(1)
        entropy = entropy - (lsm.exp() * lsm).sum(-1)
    return logp, entropy


# ------------------------------------------------------------------- loss

VALUE_COEF = 0.5
ENTROPY_COEF = 0.01
CLIP_EPS = 0.2


class NonFiniteLossError(FloatingPointError):
    pass


def ppo_loss(net: ActorCritic, batch: Dict[str, torch.Tensor], old_log_probs, advantages, returns,
             eps: float = CLIP_EPS, value_coef: float = VALUE_COEF, entropy_coef: float = ENTROPY_COEF):
    """Clipped-surrogate PPO loss. Returns (loss, stats dict)."""
    feats, _ = net.features(batch["obs"], batch.get("hidden"))
    logits = net.logits(feats)
    values = net.value(feats, batch["global_obs"])
    logp, entropy = batch_log_probs(logits, batch["actions"])
    ratio = torch.exp(logp - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * advantages
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = ((values - returns) ** 2).mean()
    entropy_mean = entropy.mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy_mean
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite PPO loss: policy={policy_loss.item()} value={value_loss.item()}")
    stats = {
        "policy_loss": policy_loss.item(), "value_loss": value_loss.item(),
        "entropy": entropy_mean.item(), "ratio_mean": ratio.mean().item(),
    }
    return loss, stats


def loss_and_gradients(batch, params: ActorCritic, old_log_probs, advantages, returns,
                       eps: float = CLIP_EPS, value_coef: float = VALUE_COEF, entropy_coef: float = ENTROPY_COEF):
    """Loss value and exact gradients keyed by parameter name."""
    loss, _ = ppo_loss(params, batch, old_log_probs, advantages, returns, eps, value_coef, entropy_coef)
    names, tensors = zip(*[(n, p) for n, p in params.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for n, p, g in zip(names, tensors, grads):
        out[n] = torch.zeros_like(p) if g is None else g
    return loss.item(), out


# ------------------------------------------------------------ checkpoints

def save_group(group: PolicyGroup, root, level: int) -> List[Path]:
    """Write ``<root>/<policy>/<aircraft>/<level>/<version>/`` per network."""
    paths = []
    for key, net in group.items():
        kind = "any" if key is None else key.value.lower()
        path = Path(root) / group.policy.value / kind / f"L{level}" / str(net.version)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(net.state_dict(), path / "params.pt")
        manifest = {
            "format": 1,
            "config": net.cfg.to_dict(),
            "version": {"level": net.version.level, "iteration": net.version.iteration},
            "level": level,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def load_net(path, shared: Optional[nn.Linear] = None) -> ActorCritic:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    net = ActorCritic(NetworkConfig.from_dict(manifest["config"]), 0, shared)
    net.load_state_dict(torch.load(path / "params.pt", weights_only=True))
    net.version = Version(**manifest["version"])
    return net


def load_group(policy: PolicyKind, paths: Dict) -> PolicyGroup:
    """Load networks of one group from checkpoint directories keyed by kind."""
    policy = PolicyKind(policy)
    if policy is PolicyKind.COMMANDER:
        return PolicyGroup(policy, {None: load_net(paths[None])})
    ac1 = load_net(paths[AircraftKind.AC1])
    ac2 = load_net(paths[AircraftKind.AC2], shared=ac1.shared)
    # AC2 file holds the same shared weights; reload AC1's copy to be safe
    ac1.shared.load_state_dict({k[len("shared."):]: v for k, v in
                                torch.load(Path(paths[AircraftKind.AC1]) / "params.pt", weights_only=True).items()
                                if k.startswith("shared.")})
    return PolicyGroup(policy, {AircraftKind.AC1: ac1, AircraftKind.AC2: ac2})
