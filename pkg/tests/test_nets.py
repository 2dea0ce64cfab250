import math

import numpy as np
import pytest
import torch

from aircombat.nets import (
    ActionDistribution, NetworkConfig, NonFiniteLossError, Version, clone_group, forward_actor, forward_critic,
    init_group, init_params, load_group, loss_and_gradients, ppo_loss, sample_action, save_group,
)
from aircombat.policy_io import GLOBAL_OBS_DIM, MAX_TEAM, SLOT_LEN, PolicyKind, obs_dim
from aircombat.sim import AircraftKind

SMALL = dict(embed_dim=8, attention_dim=4, recurrent_hidden=8)


def random_batch(net, n=6, seed=0):
    gen = np.random.default_rng(seed)
    obs = torch.as_tensor(gen.random((n, net.cfg.obs_dim)))
    gobs = gen.random((n, GLOBAL_OBS_DIM))
    gobs[:, -2 * MAX_TEAM:] = gen.integers(0, 2, (n, 2 * MAX_TEAM))
    actions = torch.as_tensor(np.stack([gen.integers(0, k, n) for k in net.cfg.head_sizes], 1))
    batch = {"obs": obs, "global_obs": torch.as_tensor(gobs), "actions": actions}
    if net.recurrent:
        batch["hidden"] = torch.as_tensor(gen.normal(size=(n, net.cfg.recurrent_hidden)) * 0.5)
    return batch


def gradient_check(net, seed):
    batch = random_batch(net, seed=seed)
    gen = np.random.default_rng(seed + 1)
    n = batch["obs"].shape[0]
    with torch.no_grad():
        feats, _ = net.features(batch["obs"], batch.get("hidden"))
        from aircombat.nets import batch_log_probs
        logp, _ = batch_log_probs(net.logits(feats), batch["actions"])
    # keep ratios well away from the clip kinks
    shift = torch.as_tensor(gen.choice([-0.5, 0.0, 0.5], n))
    old = logp + shift
    adv = torch.as_tensor(gen.normal(size=n))
    ret = torch.as_tensor(gen.normal(size=n))
    _, grads = loss_and_gradients(batch, net, old, adv, ret)
    h = 1e-5
    # relative error per tensor; the floor only matters for tensors whose true
    # gradient is zero (attention key bias: softmax ignores a per-query shift)
    floor = 1e-6
    worst = 0.0
    for name, p in net.named_parameters():
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up, _ = ppo_loss(net, batch, old, adv, ret)
            flat[i] = orig - h
            down, _ = ppo_loss(net, batch, old, adv, ret)
            flat[i] = orig
            fd.view(-1)[i] = (up.item() - down.item()) / (2 * h)
        g = grads[name]
        rel = (g - fd).norm().item() / max(g.norm().item(), fd.norm().item(), floor)
        worst = max(worst, rel)
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"
    return worst


@pytest.mark.parametrize("policy, kind", [
    (PolicyKind.FIGHT, AircraftKind.AC2), (PolicyKind.ESCAPE, AircraftKind.AC1), (PolicyKind.COMMANDER, None),
])
def test_gradient_check(policy, kind):
    net = init_params(NetworkConfig(policy, kind, **SMALL), seed=3)
    gradient_check(net, seed=5)


def test_same_seed_same_params():
    a, b = init_group(PolicyKind.FIGHT, 7), init_group(PolicyKind.FIGHT, 7)
    for pa, pb in zip(a.unique_parameters(), b.unique_parameters()):
        assert torch.equal(pa, pb)
        assert torch.isfinite(pa).all() and pa.abs().max() <= 1.0


def test_shared_layer_aliased_and_trained_through_ac1():
    g = init_group(PolicyKind.FIGHT, 0, **SMALL)
    ac1, ac2 = g[AircraftKind.AC1], g[AircraftKind.AC2]
    assert ac1.shared.weight.data_ptr() == ac2.shared.weight.data_ptr()
    before = ac2.shared.weight.detach().clone()
    opt = torch.optim.SGD(ac1.parameters(), lr=0.1)
    batch = random_batch(ac1)
    n = batch["obs"].shape[0]
    loss, _ = ppo_loss(ac1, batch, torch.zeros(n), torch.ones(n), torch.ones(n))
    loss.backward()
    opt.step()
    assert not torch.equal(before, ac2.shared.weight)


def test_clone_keeps_aliasing_and_independence():
    g = init_group(PolicyKind.FIGHT, 0, **SMALL)
    c = clone_group(g)
    assert c[AircraftKind.AC1].shared is c[AircraftKind.AC2].shared
    with torch.no_grad():
        g[AircraftKind.AC1].shared.weight.add_(1.0)
    assert not torch.equal(g[AircraftKind.AC1].shared.weight, c[AircraftKind.AC1].shared.weight)


def test_zero_observation_valid_distribution():
    net = init_group(PolicyKind.FIGHT, 0)[AircraftKind.AC1]
    dist, h = forward_actor(np.zeros(obs_dim(PolicyKind.FIGHT, AircraftKind.AC1)), net)
    assert h is None
    assert [len(p) for p in dist.probs] == [13, 9, 2, 2]
    for p in dist.probs:
        assert abs(p.sum() - 1) < 1e-6


def test_length_mismatch_raises():
    net = init_group(PolicyKind.FIGHT, 0)[AircraftKind.AC1]
    with pytest.raises(ValueError):
        forward_actor(np.zeros(27), net)


def test_absent_token_permutation_invariance():
    net = init_group(PolicyKind.FIGHT, 0)[AircraftKind.AC2]
    # blocks: own 10, opponent 9, friend 8; zero out opponent-sized and friend blocks -> equal padded tokens
    # permuting identical tokens cannot change a mean-pooled attention output
    obs = torch.zeros(1, 27, dtype=torch.float64)
    obs[0, :10] = torch.rand(10, dtype=torch.float64)
    tokens = torch.stack([torch.tanh(e(obs[:, s])) for e, s in zip(net.embed, net._slices)], 1)
    swapped = tokens[:, [0, 2, 1]]
    # the two padded tokens differ only by embedding bias (zero at init), so they are identical
    assert torch.allclose(tokens[:, 1], tokens[:, 2])
    assert torch.allclose(net.attention(tokens), net.attention(swapped))


def test_recurrent_state_dependence_and_reset():
    net = init_group(PolicyKind.COMMANDER, 0)[None]
    obs = np.random.default_rng(0).random(39)
    d0, h1 = forward_actor(obs, net, net.initial_state())
    d1, _ = forward_actor(obs, net, h1)
    assert not np.allclose(d0.probs[0], d1.probs[0])
    d2, _ = forward_actor(obs, net, net.initial_state())
    assert np.array_equal(d0.probs[0], d2.probs[0])
    with pytest.raises(ValueError):
        forward_actor(obs, net)


def test_critic_masks_dead_slots():
    net = init_group(PolicyKind.FIGHT, 0)[AircraftKind.AC1]
    gen = np.random.default_rng(1)
    obs = gen.random(29)
    g = gen.random(GLOBAL_OBS_DIM)
    g[-2 * MAX_TEAM:] = 1
    g[-2 * MAX_TEAM + 3] = 0
    v1 = forward_critic(g, net, obs)
    g2 = g.copy()
    g2[3 * SLOT_LEN:4 * SLOT_LEN] = gen.random(SLOT_LEN)
    assert forward_critic(g2, net, obs) == v1
    assert math.isfinite(v1)
    with pytest.raises(ValueError):
        forward_critic(g[:-1], net, obs)


def test_sample_action_degenerate_and_uniform():
    rng = np.random.default_rng(0)
    dist = ActionDistribution([np.array([0, 0, 1.0]), np.full(13, 1 / 13)])
    idx, lp = sample_action(dist, rng)
    assert idx[0] == 2
    assert lp == pytest.approx(-math.log(13))


def test_sample_frequencies():
    rng = np.random.default_rng(0)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    dist = ActionDistribution([p])
    counts = np.bincount([sample_action(dist, rng)[0][0] for _ in range(100_000)], minlength=4) / 100_000
    assert np.all(np.abs(counts - p) < 4 * np.sqrt(p * (1 - p) / 100_000))


def test_distribution_validation():
    with pytest.raises(ValueError):
        ActionDistribution([np.array([0.5, 0.6])])


def test_clip_uses_clipped_ratio():
    net = init_params(NetworkConfig(PolicyKind.ESCAPE, AircraftKind.AC1, **SMALL), 0)
    batch = random_batch(net, n=1)
    from aircombat.nets import batch_log_probs
    with torch.no_grad():
        feats, _ = net.features(batch["obs"])
        logp, ent = batch_log_probs(net.logits(feats), batch["actions"])
        value = net.value(feats, batch["global_obs"])
    old = logp - math.log(1.5)  # ratio 1.5
    adv = torch.tensor([2.0], dtype=torch.float64)
    loss, stats = ppo_loss(net, batch, old, adv, value.detach(), entropy_coef=0.0)
    assert stats["ratio_mean"] == pytest.approx(1.5)
    assert loss.item() == pytest.approx(-1.2 * 2.0)


def test_ratio_one_gives_policy_gradient():
    net = init_params(NetworkConfig(PolicyKind.ESCAPE, AircraftKind.AC2, **SMALL), 0)
    batch = random_batch(net, n=5)
    from aircombat.nets import batch_log_probs
    feats, _ = net.features(batch["obs"])
    logp, _ = batch_log_probs(net.logits(feats), batch["actions"])
    adv = torch.as_tensor(np.random.default_rng(2).normal(size=5))
    pg = torch.autograd.grad(-(logp * adv).mean(), net.heads[0].weight)[0]
    _, grads = loss_and_gradients(batch, net, logp.detach(), adv, torch.zeros(5), value_coef=0.0, entropy_coef=0.0)
    assert torch.allclose(grads["heads.0.weight"], pg)


def test_non_finite_loss_raises():
    net = init_params(NetworkConfig(PolicyKind.ESCAPE, AircraftKind.AC1, **SMALL), 0)
    batch = random_batch(net, n=2)
    with pytest.raises(NonFiniteLossError):
        ppo_loss(net, batch, torch.zeros(2), torch.tensor([math.nan, 1.0], dtype=torch.float64), torch.zeros(2))


def test_checkpoint_roundtrip(tmp_path):
    g = init_group(PolicyKind.FIGHT, 4, **SMALL)
    g.set_version(Version(3, 12))
    save_group(g, tmp_path, 3)
    paths = {k: tmp_path / "fight" / k.value.lower() / "L3" / "L3-000012" for k in AircraftKind}
    back = load_group(PolicyKind.FIGHT, paths)
    for k in AircraftKind:
        for (n1, p1), (n2, p2) in zip(g[k].state_dict().items(), back[k].state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)
    assert back.version == Version(3, 12)
    assert back[AircraftKind.AC1].shared is back[AircraftKind.AC2].shared


def test_version_ordering():
    assert Version(1, 9) < Version(2, 0) < Version(2, 1)
    assert str(Version(2, 1)) == "L2-000001"
