from dataclasses import replace

import numpy as np
import pytest

from uavreward.agents import (MLP, Adam, AgentConfig, NonFiniteError, ReplayBuffer, TD3Agent, Transition,
                              actor_loss_and_grads, critic_loss_and_grads, make_agent, soft_update)

PROBE_CFG = AgentConfig(hidden_sizes=(8, 8), batch_size=16, warmup_steps=0)


# --- gradient oracle -------------------------------------------------------------

def relu_masks(net, x):
    _, acts = net.forward(x, cache=True)
    return [a > 0 for a in acts[1:-1]]


def finite_difference_check(loss_fn, param_list, masks_fn, h=1e-6, floor=1e-6):
    """Central differences over every coordinate; skips coordinates whose ±h probe flips a ReLU."""
    _, analytic = loss_fn()
    base = masks_fn()
    worst, checked = 0.0, 0
    for p, g in zip(param_list, analytic):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            plus, m_plus = loss_fn()[0], masks_fn()
            flat[j] = old - h
            minus, m_minus = loss_fn()[0], masks_fn()
            flat[j] = old
            if any(not (np.array_equal(a, b) and np.array_equal(a, c))
                   for a, b, c in zip(base, m_plus, m_minus)):
                continue
            numeric = (plus - minus) / (2 * h)
            err = abs(numeric - gflat[j]) / max(abs(numeric), abs(gflat[j]), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked


def probe_agent(point):
    # obs 3 + action 1 -> each critic is exactly 4-8-8-1
    return TD3Agent(3, 1, PROBE_CFG, seed=point)


def test_gradient_oracle_100_points():
    worst = {"actor": 0.0, "critic0": 0.0, "critic1": 0.0}
    total = 0
    for point in range(100):
        agent = probe_agent(point)
        assert agent.critics[0].sizes == (4, 8, 8, 1)
        rng = np.random.default_rng(1000 + point)
        obs = rng.normal(size=(6, 3))
        act = rng.uniform(-1, 1, size=(6, 1))
        target = rng.normal(size=6)
        for k, critic in enumerate(agent.critics):
            x = np.concatenate([obs, act], axis=1)
            w, n = finite_difference_check(lambda: critic_loss_and_grads(critic, obs, act, target),
                                           critic.params, lambda: relu_masks(critic, x))
            worst[f"critic{k}"] = max(worst[f"critic{k}"], w)
            total += n

        def masks():
            a = agent.actor(obs)
            return relu_masks(agent.actor, obs) + relu_masks(agent.critics[0], np.concatenate([obs, a], axis=1))

        w, n = finite_difference_check(lambda: actor_loss_and_grads(agent.actor, agent.critics[0], obs),
                                       agent.actor.params, masks)
        worst["actor"] = max(worst["actor"], w)
        total += n
    assert total > 0.9 * 100 * (121 * 2 + 113)
    for name, w in worst.items():
        assert w < 1e-4, (name, w)


def test_input_gradient_matches_finite_difference():
    net = MLP((4, 8, 8, 1), "tanh", np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(1, 4))
    _, acts = net.forward(x, cache=True)
    _, g_in = net.backward(acts, np.ones((1, 1)))
    h = 1e-6
    for j in range(4):
        e = np.zeros_like(x)
        e[0, j] = h
        numeric = (net(x + e) - net(x - e))[0, 0] / (2 * h)
        assert numeric == pytest.approx(g_in[0, j], rel=1e-5, abs=1e-9)


# --- building blocks -------------------------------------------------------------------

def test_actor_output_bounded():
    net = MLP((5, 16, 16, 2), "tanh", np.random.default_rng(0))
    out = net(np.random.default_rng(1).normal(scale=100, size=(50, 5)))
    assert np.all(np.abs(out) <= 1.0)


def test_nonfinite_forward_raises():
    net = MLP((2, 4, 1), "linear", np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        net(np.array([[np.nan, 0.0]]))


def test_adam_rejects_nonfinite_gradient():
    p = [np.zeros(3)]
    with pytest.raises(NonFiniteError):
        Adam(p, 1e-3).step([np.array([0.0, np.inf, 0.0])])


def test_soft_update():
    rng = np.random.default_rng(0)
    online, target = MLP((3, 4, 1), rng=rng), MLP((3, 4, 1), rng=rng)
    before = [t.copy() for t in target.params]
    soft_update(target, online, 0.25)
    for t, b, o in zip(target.params, before, online.params):
        assert np.allclose(t, 0.75 * b + 0.25 * o, rtol=0, atol=1e-15)
    soft_update(target, online, 1.0)
    assert all(np.array_equal(t, o) for t, o in zip(target.params, online.params))
    snapshot = [t.copy() for t in target.params]
    soft_update(target, MLP((3, 4, 1), rng=rng), 0.0)
    assert all(np.array_equal(t, s) for t, s in zip(target.params, snapshot))
    with pytest.raises(ValueError):
        soft_update(target, MLP((3, 5, 1), rng=rng), 0.5)


def test_replay_fifo_eviction():
    buf = ReplayBuffer(3, obs_dim=1, act_dim=1)
    for k in range(5):
        buf.push(Transition(np.array([k]), np.array([0.0]), float(k), np.array([k + 1]), k == 4))
    assert len(buf) == 3
    assert [t.reward for t in buf.ordered()] == [2.0, 3.0, 4.0]
    assert buf.ordered()[-1].done


def test_replay_rejects_bad_transitions():
    buf = ReplayBuffer(4, 2, 1)
    with pytest.raises(NonFiniteError):
        buf.add(np.zeros(2), np.zeros(1), float("nan"), np.zeros(2), False)
    with pytest.raises(ValueError):
        buf.add(np.zeros(3), np.zeros(1), 0.0, np.zeros(2), False)


def filled_buffer(n=64, obs_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(1000, obs_dim, 1)
    for _ in range(n):
        buf.add(rng.normal(size=obs_dim), rng.uniform(-1, 1, 1), float(rng.normal()), rng.normal(size=obs_dim),
                bool(rng.random() < 0.1))
    return buf


# --- TD3 specifics ------------------------------------------------------------------

def test_td3_target_uses_min_of_twin_critics():
    agent = probe_agent(0)
    batch = filled_buffer().sample(16, np.random.default_rng(0))
    agent.config = replace(PROBE_CFG, td3_target_noise_clip=0.0)
    a_next = agent.actor_target(batch["next_obs"])
    x = np.concatenate([batch["next_obs"], a_next], axis=1)
    expect = np.minimum(agent.critic_targets[0](x)[:, 0], agent.critic_targets[1](x)[:, 0])
    assert np.allclose(agent.critic_target_values(batch), expect, rtol=0, atol=1e-15)
    y = agent.td_target(batch)
    assert np.allclose(y, batch["rew"] + 0.99 * (1 - batch["done"]) * expect, rtol=0, atol=1e-12)


def test_td3_smoothing_noise_clipped():
    agent = probe_agent(1)
    eps = agent.smoothing_noise((10_000, 2))
    assert np.abs(eps).max() <= PROBE_CFG.td3_target_noise_clip
    agent.config = replace(PROBE_CFG, td3_target_noise_clip=0.0)
    assert not np.any(agent.smoothing_noise((100, 2)))


def test_td3_delayed_actor_and_targets():
    agent = probe_agent(2)
    buf = filled_buffer()
    actor0 = [p.copy() for p in agent.actor.params]
    target0 = [p.copy() for p in agent.critic_targets[0].params]
    critic0 = [p.copy() for p in agent.critics[0].params]
    c_loss, a_loss = agent.update(buf, step_index=1)
    assert a_loss is None
    assert all(np.array_equal(a, b) for a, b in zip(agent.actor.params, actor0))
    assert all(np.array_equal(a, b) for a, b in zip(agent.critic_targets[0].params, target0))
    assert not all(np.array_equal(a, b) for a, b in zip(agent.critics[0].params, critic0))
    _, a_loss = agent.update(buf, step_index=2)
    assert a_loss is not None
    assert not all(np.array_equal(a, b) for a, b in zip(agent.actor.params, actor0))


def test_update_waits_for_full_batch():
    for alg in ("ddpg", "td3"):
        agent = make_agent(alg, 3, 1, PROBE_CFG)
        assert agent.update(filled_buffer(n=5)) is None


@pytest.mark.parametrize("alg", ["ddpg", "td3"])
def test_critic_overfits_single_batch(alg):
    agent = make_agent(alg, 3, 1, replace(PROBE_CFG, hidden_sizes=(32, 32), critic_lr=3e-3), seed=0)
    rng = np.random.default_rng(5)
    obs, act = rng.normal(size=(32, 3)), rng.uniform(-1, 1, (32, 1))
    target = np.sin(obs[:, 0]) + act[:, 0]
    first = None
    for _ in range(1500):
        loss, grads = critic_loss_and_grads(agent.critics[0], obs, act, target)
        first = loss if first is None else first
        agent.critic_opts[0].step(grads)
    assert loss < 1e-3 * first


def test_actor_climbs_critic():
    agent = make_agent("ddpg", 3, 1, PROBE_CFG, seed=0)
    obs = np.random.default_rng(0).normal(size=(32, 3))
    agent.actor_opt.lr = 1e-2
    start = actor_loss_and_grads(agent.actor, agent.critics[0], obs)[0]
    for _ in range(200):
        loss, grads = actor_loss_and_grads(agent.actor, agent.critics[0], obs)
        agent.actor_opt.step(grads)
    assert loss < start


def test_exploration_bounds_and_determinism():
    a, b = make_agent("td3", 3, 2, PROBE_CFG, seed=4), make_agent("td3", 3, 2, PROBE_CFG, seed=4)
    obs = np.ones(3)
    for _ in range(20):
        x, y = a.act(obs, explore=True), b.act(obs, explore=True)
        assert np.array_equal(x, y) and np.all(np.abs(x) <= 1)
    with pytest.raises(ValueError):
        a.act(np.ones(4))


@pytest.mark.parametrize("alg", ["ddpg", "td3"])
def test_checkpoint_round_trip(alg, tmp_path):
    agent = make_agent(alg, 3, 1, PROBE_CFG, seed=9)
    buf = filled_buffer()
    for k in range(4):
        agent.update(buf, k)
    path = tmp_path / "agent.npz"
    agent.save(path)
    loaded = type(agent).load(path)
    assert type(loaded) is type(agent) and loaded.config == agent.config
    for name, net in agent.networks().items():
        other = loaded.networks()[name]
        assert all(np.array_equal(p, q) for p, q in zip(net.params, other.params))
    obs = np.random.default_rng(0).normal(size=3)
    assert np.array_equal(loaded.act(obs), agent.act(obs))


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        make_agent("sac", 3, 1)


def test_gradient_oracle_with_preact_penalty():
    for point in range(10):
        agent = TD3Agent(3, 1, replace(PROBE_CFG, preact_penalty=0.5), seed=200 + point)
        obs = np.random.default_rng(point).normal(size=(6, 3))

        def masks():
            a = agent.actor(obs)
            return relu_masks(agent.actor, obs) + relu_masks(agent.critics[0], np.concatenate([obs, a], axis=1))

        w, n = finite_difference_check(
            lambda: actor_loss_and_grads(agent.actor, agent.critics[0], obs, preact_penalty=0.5),
            agent.actor.params, masks)
        assert n > 50 and w < 1e-4


def test_zero_loss_batch_gives_zero_gradients():
    critic = MLP((4, 8, 8, 1), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    obs, act = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))
    target = critic(np.concatenate([obs, act], axis=1))[:, 0]
    loss, grads = critic_loss_and_grads(critic, obs, act, target)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads)


def test_loss_scaling_scales_gradients():
    agent = probe_agent(3)
    rng = np.random.default_rng(2)
    obs, act, target = rng.normal(size=(5, 3)), rng.normal(size=(5, 1)), rng.normal(size=5)
    l1, g1 = critic_loss_and_grads(agent.critics[0], obs, act, target)
    l2, g2 = critic_loss_and_grads(agent.critics[0], obs, act, target, loss_scale=2.0)
    assert l2 == pytest.approx(2 * l1, rel=1e-15)
    assert all(np.allclose(b, 2 * a, rtol=1e-14, atol=0) for a, b in zip(g1, g2))
    _, a1 = actor_loss_and_grads(agent.actor, agent.critics[0], obs)
    _, a2 = actor_loss_and_grads(agent.actor, agent.critics[0], obs, loss_scale=2.0)
    assert all(np.allclose(b, 2 * a, rtol=1e-14, atol=0) for a, b in zip(a1, a2))


def test_terminal_zero_reward_target_is_zero():
    agent = make_agent("ddpg", 3, 1, PROBE_CFG)
    batch = filled_buffer().sample(16, np.random.default_rng(0))
    batch["rew"][:] = 0.0
    batch["done"][:] = 1.0
    assert not np.any(agent.td_target(batch))
