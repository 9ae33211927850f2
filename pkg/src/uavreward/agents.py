"""DDPG and TD3 on plain numpy: MLPs with hand-written backprop, Adam, replay."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when activations, losses or gradients stop being finite."""


@dataclass(frozen=True)
class AgentConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    batch_size: int = 64
    discount: float = 0.99
    buffer_capacity: int = 100_000
    soft_update_tau: float = 0.005
    exploration_noise_std: float = 0.1
    td3_policy_delay: int = 2
    td3_target_noise_std: float = 0.2
    td3_target_noise_clip: float = 0.5
    hidden_sizes: tuple[int, int] = (256, 256)
    warmup_steps: int = 1000
    preact_penalty: float = 0.0  # weight on mean squared pre-tanh actor output

    def __post_init__(self):
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not 0 < self.soft_update_tau <= 1:
            raise ValueError("soft_update_tau must lie in (0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size exceeds buffer_capacity")
        if self.preact_penalty < 0:
            raise ValueError("preact_penalty must be >= 0")
        if self.td3_policy_delay < 1:
            raise ValueError("td3_policy_delay must be >= 1")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @classmethod
    def from_mapping(cls, items: dict) -> "AgentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in kinds:
                raise KeyError(f"unknown AgentConfig field: {key}")
            if key == "hidden_sizes":
                kw[key] = tuple(int(x) for x in str(raw).replace("(", "").replace(")", "").split(",") if x.strip())
            elif key in ("batch_size", "buffer_capacity", "td3_policy_delay", "warmup_steps"):
                kw[key] = int(float(raw))
            else:
                kw[key] = float(raw)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


# --- networks ----------------------------------------------------------------

class MLP:
    """Fully connected net, ReLU hidden layers, ``tanh`` or linear output."""

    def __init__(self, sizes, out_activation="linear", rng=None, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        self.out_activation = out_activation
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            self.params.append(rng.uniform(-bound, bound, fan_out).astype(dtype))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.sizes = self.sizes
        clone.out_activation = self.out_activation
        clone.params = [p.copy() for p in self.params]
        return clone

    def forward(self, x, cache=False):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < self.n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.out_activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite output from {self.sizes} network "
                                 f"(max |param| = {max(float(np.abs(p).max()) for p in self.params):.3g})")
        return (h, acts) if cache else h

    __call__ = forward

    def preactivation(self, acts):
        """Output-layer input to the squashing function, recomputed from cached activations."""
        return acts[-2] @ self.params[-2] + self.params[-1]

    def backward(self, acts, grad_out, grad_preact=None):
        """Backprop ``grad_out`` (dL/d output) through cached activations.

        ``grad_preact`` is an extra dL/dz added at the output pre-activation.
        Returns parameter gradients (same layout as ``params``) and dL/d input.
        """
        grads = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            out = acts[i + 1]
            if i == self.n_layers - 1:
                if self.out_activation == "tanh":
                    g = g * (1.0 - out * out)
                if grad_preact is not None:
                    g = g + grad_preact
            else:
                g = g * (out > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient; update aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= scale * m / (np.sqrt(v) + self.eps)


def soft_update(target: MLP, online: MLP, tau: float) -> None:
    """Polyak averaging in place: target <- tau * online + (1 - tau) * target."""
    if len(target.params) != len(online.params):
        raise ValueError("network structures differ")
    for t, o in zip(target.params, online.params):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        if tau == 1.0:
            t[...] = o
        elif tau != 0.0:
            t *= 1.0 - tau
            t += tau * o


# --- losses with gradients ---------------------------------------------------

def critic_loss_and_grads(critic: MLP, obs, act, target, loss_scale=1.0):
    """Mean squared TD error and its exact gradient w.r.t. critic parameters."""
    q, acts = critic.forward(np.concatenate([obs, act], axis=1), cache=True)
    err = q - target.reshape(-1, 1)
    loss = loss_scale * float(np.mean(err ** 2))
    grads, _ = critic.backward(acts, loss_scale * 2.0 * err / err.shape[0])
    return loss, grads


def actor_loss_and_grads(actor: MLP, critic: MLP, obs, loss_scale=1.0, preact_penalty=0.0):
    """-mean Q(s, mu(s)) (+ optional pre-tanh penalty) and its gradient w.r.t. actor parameters.

    The critic is held fixed. ``preact_penalty`` adds ``c * mean(sum z^2)`` over
    the actor's pre-squash outputs, which keeps tanh away from saturation.
    """
    a, a_acts = actor.forward(obs, cache=True)
    q, c_acts = critic.forward(np.concatenate([obs, a], axis=1), cache=True)
    n = q.shape[0]
    loss = -loss_scale * float(np.mean(q))
    _, g_in = critic.backward(c_acts, np.full_like(q, -loss_scale / n))
    g_pre = None
    if preact_penalty:
        z = actor.preactivation(a_acts)
        loss += loss_scale * preact_penalty * float(np.sum(z * z)) / n
        g_pre = loss_scale * preact_penalty * 2.0 * z / n
    grads, _ = actor.backward(a_acts, g_in[:, obs.shape[1]:], g_pre)
    return loss, grads


def gradients(network: MLP, batch: dict, critic: MLP | None = None):
    """Analytic loss gradients for ``network``.

    With ``critic`` given, ``network`` is treated as an actor and the batch
    needs ``obs``; otherwise it is a critic and the batch needs ``obs``,
    ``act`` and ``target``.
    """
    if critic is not None:
        return actor_loss_and_grads(network, critic, batch["obs"], batch.get("scale", 1.0))
    return critic_loss_and_grads(network, batch["obs"], batch["act"], batch["target"], batch.get("scale", 1.0))


# --- replay ------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    done: bool


class ReplayBuffer:
    """FIFO ring buffer of transitions stored column-wise."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, dtype=np.float64):
        self.capacity = int(capacity)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.obs = np.zeros((capacity, obs_dim), dtype)
        self.act = np.zeros((capacity, act_dim), dtype)
        self.rew = np.zeros(capacity, dtype)
        self.next_obs = np.zeros((capacity, obs_dim), dtype)
        self.done = np.zeros(capacity, dtype)
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def add(self, obs, act, reward, next_obs, done):
        if not math.isfinite(reward):
            raise NonFiniteError(f"non-finite reward {reward!r}")
        obs, act, next_obs = np.asarray(obs), np.asarray(act), np.asarray(next_obs)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,) or act.shape != (self.act_dim,):
            raise ValueError("transition dimensions do not match the buffer")
        i = self._head
        self.obs[i], self.act[i], self.rew[i] = obs, act, reward
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: Transition):
        self.add(t.observation, t.action, t.reward, t.next_observation, t.done)

    def ordered(self) -> list[Transition]:
        """Stored transitions from oldest to newest."""
        start = self._head if self.size == self.capacity else 0
        idx = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self.obs[i].copy(), self.act[i].copy(), float(self.rew[i]),
                           self.next_obs[i].copy(), bool(self.done[i])) for i in idx]

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, size=batch_size)
        return {"obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
                "next_obs": self.next_obs[idx], "done": self.done[idx]}


# --- agents ------------------------------------------------------------------

class Agent:
    """Shared actor machinery; subclasses supply the critic(s) and update rule."""

    algorithm = "base"
    n_critics = 1

    def __init__(self, obs_dim: int, act_dim: int, config: AgentConfig = AgentConfig(), seed: int = 0,
                 dtype=np.float64):
        self.obs_dim, self.act_dim, self.config, self.seed = obs_dim, act_dim, config, seed
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        h1, h2 = config.hidden_sizes
        self.actor = MLP((obs_dim, h1, h2, act_dim), "tanh", self.rng, dtype)
        self.critics = [MLP((obs_dim + act_dim, h1, h2, 1), "linear", self.rng, dtype)
                        for _ in range(self.n_critics)]
        self.actor_target = self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = Adam(self.actor.params, config.actor_lr)
        self.critic_opts = [Adam(c.params, config.critic_lr) for c in self.critics]
        self.dtype = dtype

    def act(self, observation, explore: bool = False) -> np.ndarray:
        obs = np.asarray(observation, dtype=self.dtype)
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"observation has shape {obs.shape}, expected ({self.obs_dim},)")
        a = self.actor(obs[None, :])[0]
        if explore:
            a = a + self.rng.normal(0.0, self.config.exploration_noise_std, self.act_dim)
        return np.clip(a, -1.0, 1.0)

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, self.act_dim)

    def critic_target_values(self, batch) -> np.ndarray:
        raise NotImplementedError

    def td_target(self, batch) -> np.ndarray:
        cfg = self.config
        future = self.critic_target_values(batch)
        return batch["rew"] + cfg.discount * (1.0 - batch["done"]) * future

    def _soft_update_all(self, tau):
        soft_update(self.actor_target, self.actor, tau)
        for t, c in zip(self.critic_targets, self.critics):
            soft_update(t, c, tau)

    def update(self, buffer: ReplayBuffer, step_index: int = 0):
        raise NotImplementedError

    # -- persistence ----------------------------------------------------------
    def networks(self) -> dict[str, MLP]:
        nets = {"actor": self.actor, "actor_target": self.actor_target}
        for k, (c, t) in enumerate(zip(self.critics, self.critic_targets)):
            nets[f"critic{k}"], nets[f"critic{k}_target"] = c, t
        return nets

    def save(self, path) -> None:
        arrays = {}
        for name, net in self.networks().items():
            for j, p in enumerate(net.params):
                arrays[f"{name}/{j}"] = p
        meta = {"version": CHECKPOINT_VERSION, "algorithm": self.algorithm, "obs_dim": self.obs_dim,
                "act_dim": self.act_dim, "seed": self.seed, "config": self.config.to_dict()}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @staticmethod
    def load(path) -> "Agent":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            cls = {"ddpg": DDPGAgent, "td3": TD3Agent}[meta["algorithm"]]
            config = AgentConfig(**{**meta["config"], "hidden_sizes": tuple(meta["config"]["hidden_sizes"])})
            agent = cls(meta["obs_dim"], meta["act_dim"], config, meta["seed"])
            for name, net in agent.networks().items():
                net.params[:] = [data[f"{name}/{j}"].copy() for j in range(len(net.params))]
        agent.actor_opt = Adam(agent.actor.params, config.actor_lr)
        agent.critic_opts = [Adam(c.params, config.critic_lr) for c in agent.critics]
        return agent


class DDPGAgent(Agent):
    algorithm = "ddpg"
    n_critics = 1

    def critic_target_values(self, batch):
        a_next = self.actor_target(batch["next_obs"])
        x = np.concatenate([batch["next_obs"], a_next], axis=1)
        return self.critic_targets[0](x)[:, 0]

    def update(self, buffer: ReplayBuffer, step_index: int = 0):
        """One DDPG gradient step; returns ``(critic_loss, actor_loss)`` or None if the buffer is short."""
        cfg = self.config
        if len(buffer) < cfg.batch_size:
            return None
        batch = buffer.sample(cfg.batch_size, self.rng)
        y = self.td_target(batch)
        c_loss, c_grads = critic_loss_and_grads(self.critics[0], batch["obs"], batch["act"], y)
        self.critic_opts[0].step(c_grads)
        a_loss, a_grads = actor_loss_and_grads(self.actor, self.critics[0], batch["obs"],
                                               preact_penalty=cfg.preact_penalty)
        self.actor_opt.step(a_grads)
        self._soft_update_all(cfg.soft_update_tau)
        return c_loss, a_loss


class TD3Agent(Agent):
    algorithm = "td3"
    n_critics = 2

    def smoothing_noise(self, shape) -> np.ndarray:
        cfg = self.config
        eps = self.rng.normal(0.0, cfg.td3_target_noise_std, shape)
        return np.clip(eps, -cfg.td3_target_noise_clip, cfg.td3_target_noise_clip)

    def critic_target_values(self, batch):
        a_next = self.actor_target(batch["next_obs"])
        a_next = np.clip(a_next + self.smoothing_noise(a_next.shape), -1.0, 1.0)
        x = np.concatenate([batch["next_obs"], a_next], axis=1)
        q1 = self.critic_targets[0](x)[:, 0]
        q2 = self.critic_targets[1](x)[:, 0]
        return np.minimum(q1, q2)

    def update(self, buffer: ReplayBuffer, step_index: int = 0):
        """Twin-critic step; actor and targets move only every ``td3_policy_delay`` calls.

        Returns ``(critic_loss, actor_loss_or_None)`` or None if the buffer is short.
        """
        cfg = self.config
        if len(buffer) < cfg.batch_size:
            return None
        batch = buffer.sample(cfg.batch_size, self.rng)
        y = self.td_target(batch)
        c_loss = 0.0
        for critic, opt in zip(self.critics, self.critic_opts):
            loss, grads = critic_loss_and_grads(critic, batch["obs"], batch["act"], y)
            opt.step(grads)
            c_loss += loss
        a_loss = None
        if step_index % cfg.td3_policy_delay == 0:
            a_loss, a_grads = actor_loss_and_grads(self.actor, self.critics[0], batch["obs"],
                                                   preact_penalty=cfg.preact_penalty)
            self.actor_opt.step(a_grads)
            self._soft_update_all(cfg.soft_update_tau)
        return c_loss, a_loss


def make_agent(algorithm: str, obs_dim: int, act_dim: int, config: AgentConfig = AgentConfig(),
               seed: int = 0, dtype=np.float64) -> Agent:
    try:
        cls = {"ddpg": DDPGAgent, "td3": TD3Agent}[algorithm]
    except KeyError:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected 'ddpg' or 'td3'") from None
    return cls(obs_dim, act_dim, config, seed, dtype)
