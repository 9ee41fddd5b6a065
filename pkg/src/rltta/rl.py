"""Augmentation-selection agents.

The environment wraps a frozen classifier: the state is an image's feature
map, an action is an index into the augmentation bank and the reward is the
drop in per-sample cross-entropy the augmentation causes. Two agents learn
per-state action scores over the bank: a DQN (Q-values) and PPO with the
clipped surrogate (policy probabilities).
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment
from . import nn_core as nc


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


def transition_from_losses(state, action, l1, l2, next_features, done=True) -> Transition:
    """Reward is the signed loss drop ``l1 - l2``; the state only advances to
    the augmented image's features when the augmentation lowered the loss."""
    if not (math.isfinite(l1) and math.isfinite(l2)):
        raise ValueError(f"non-finite loss (l1={l1}, l2={l2})")
    improved = l2 < l1
    return Transition(
        state=np.asarray(state),
        action=int(action),
        reward=float(l1 - l2),
        next_state=np.asarray(next_features if improved else state),
        done=bool(done),
    )


def env_step(model, image, label, action: int, current_state, bank=None, done=True) -> Transition:
    """One environment step against a frozen classifier.

    ``model`` only needs ``loss_of(image, label)`` and ``feature_map(image)``.
    """
    bank = bank or augment.default_bank()
    augmented = augment.apply(bank[action], image)
    l1 = model.loss_of(image, label)
    l2 = model.loss_of(augmented, label)
    nxt = model.feature_map(augmented) if l2 < l1 else current_state
    return transition_from_losses(current_state, action, l1, l2, nxt, done)


def _features_and_loss(model, image, label):
    if hasattr(model, "features_and_loss"):
        return model.features_and_loss(image, label)
    return model.feature_map(image), model.loss_of(image, label)


class AugmentationEnv:
    """Episodes over a labelled training set; one episode per sample.

    Results for (sample, action path) are cached since the classifier is
    frozen. With ``horizon > 1`` an improving augmentation replaces the
    current image, so later actions compose on top of it.
    """

    def __init__(self, model, images, labels, bank=None, horizon: int = 1):
        if len(images) == 0:
            raise ValueError("empty training set")
        if not 1 <= horizon <= 5:
            raise ValueError("horizon must be in [1, 5]")
        self.model = model
        self.images = np.asarray(images)
        self.labels = np.asarray(labels)
        self.bank = bank or augment.default_bank()
        self.horizon = horizon
        self._cache = {}
        self._index = None

    @property
    def n_samples(self) -> int:
        return len(self.images)

    @property
    def n_actions(self) -> int:
        return len(self.bank)

    @property
    def state_dim(self) -> int:
        return self.model.feature_dim

    def _node(self, index, path):
        key = (index, path)
        if key not in self._cache:
            if path:
                parent_img = self._node(index, path[:-1])[2]
                img = augment.apply(self.bank[path[-1]], parent_img)
            else:
                img = self.images[index]
            feats, loss = _features_and_loss(self.model, img, int(self.labels[index]))
            self._cache[key] = (loss, feats, img)
        return self._cache[key]

    def reset(self, index: int) -> np.ndarray:
        self._index, self._path, self._t = index, (), 0
        return self._node(index, ())[1]

    def step(self, action: int) -> Transition:
        l1, f_m, _ = self._node(self._index, self._path)
        l2, f_aug, _ = self._node(self._index, self._path + (int(action),))
        self._t += 1
        tr = transition_from_losses(f_m, action, l1, l2, f_aug, done=self._t >= self.horizon)
        if l2 < l1:
            self._path = self._path + (int(action),)
        return tr


class BanditEnv:
    """Deterministic contextual bandit with the same interface as
    :class:`AugmentationEnv`; each context is a fixed random state vector."""

    def __init__(self, rewards, state_dim: int = 8, seed: int = 0):
        self.rewards = np.asarray(rewards, dtype=np.float64)
        rng = np.random.default_rng(seed)
        self.states = rng.normal(size=(self.rewards.shape[0], state_dim)).astype(np.float32)
        self.horizon = 1
        self._index = 0

    @classmethod
    def random(cls, n_contexts=4, n_actions=14, state_dim=8, seed=0, margin=0.2):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA4D17]))
        r = rng.uniform(-1.0, 1.0, size=(n_contexts, n_actions))
        best = rng.integers(n_actions, size=n_contexts)
        for c, a in enumerate(best):
            r[c, a] = np.delete(r[c], a).max() + margin
        return cls(r, state_dim, seed)

    @property
    def n_samples(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]

    @property
    def state_dim(self):
        return self.states.shape[1]

    def optimal_actions(self):
        return self.rewards.argmax(axis=1)

    def reset(self, index):
        self._index = index
        return self.states[index]

    def step(self, action):
        s = self.states[self._index]
        return Transition(s, int(action), float(self.rewards[self._index, action]), s, True)


# --- DQN -------------------------------------------------------------------

@dataclass
class DQNConfig:
    gamma: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-6
    hidden: int = 64
    buffer_size: int = 10_000
    batch_size: int = 64
    target_every: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5


class DQNAgent:
    kind = "dqn"

    def __init__(self, state_dim: int, n_actions: int, config: DQNConfig | None = None, seed: int = 0):
        self.config = config or DQNConfig()
        self.state_dim, self.n_actions = state_dim, n_actions
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
        self.q = nc.mlp([state_dim, self.config.hidden, n_actions], init_rng, zero_last=True)
        self.target = self.q.copy()
        self.opt = nc.Adam(self.q, lr=self.config.lr, weight_decay=self.config.weight_decay)
        self.buffer = deque(maxlen=self.config.buffer_size)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
        self.updates = 0

    def _check_states(self, states):
        s = np.asarray(states, dtype=np.float32)
        if s.ndim == 1:
            s = s[None]
        if s.shape[1] != self.state_dim:
            raise nc.ShapeError(f"state dimension {s.shape[1]} != agent input {self.state_dim}")
        return s

    def action_scores(self, state) -> np.ndarray:
        return self.q.forward(self._check_states(state), "infer")[0][0].astype(np.float64)

    def scores(self, states) -> np.ndarray:
        return self.q.forward(self._check_states(states), "infer")[0].astype(np.float64)

    def act(self, state, epsilon: float) -> int:
        if self.rng.random() < epsilon:
            return int(self.rng.integers(self.n_actions))
        return int(np.argmax(self.action_scores(state)))

    def remember(self, tr: Transition) -> None:
        self.buffer.append(tr)

    def sample(self, n=None):
        n = n or self.config.batch_size
        idx = self.rng.integers(len(self.buffer), size=n)  # uniform replay
        return [self.buffer[i] for i in idx]


def dqn_targets(agent: DQNAgent, transitions) -> np.ndarray:
    r = np.array([t.reward for t in transitions], dtype=np.float64)
    done = np.array([t.done for t in transitions])
    y = r.copy()
    if not done.all():
        nxt = np.stack([t.next_state for t in transitions])[~done]
        q_next = agent.target.forward(agent._check_states(nxt), "infer")[0].astype(np.float64)
        y[~done] += agent.config.gamma * q_next.max(axis=1)
    return y


def dqn_target(agent: DQNAgent, transition: Transition) -> float:
    """``r`` for terminal transitions, else ``r + gamma * max_a' Q_target(s', a')``."""
    return float(dqn_targets(agent, [transition])[0])


def dqn_update(agent: DQNAgent, batch) -> float:
    """One Adam step on the mean squared TD error; refreshes the target net
    every ``target_every`` updates. Returns the pre-update loss."""
    if not batch:
        raise ValueError("empty minibatch")
    y = dqn_targets(agent, batch)
    states = agent._check_states(np.stack([t.state for t in batch]))
    actions = np.array([t.action for t in batch])
    q, cache = agent.q.forward(states, "train")
    rows = np.arange(len(batch))
    resid = y - q[rows, actions].astype(np.float64)
    loss = float(np.mean(resid ** 2))
    dq = np.zeros_like(q)
    dq[rows, actions] = (-2.0 * resid / len(batch)).astype(q.dtype)
    agent.q.backward(cache, dq)
    agent.opt.step()
    agent.updates += 1
    if agent.updates % agent.config.target_every == 0:
        agent.target = agent.q.copy()
    return loss


# --- PPO -------------------------------------------------------------------

@dataclass
class PPOConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    rollout_size: int = 256
    epochs: int = 4
    minibatch: int = 64
    lr: float = 1e-3
    critic_lr: float = 1e-3
    weight_decay: float = 1e-6
    hidden: int = 64
    gamma: float = 0.5


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    logps: list = field(default_factory=list)

    def add(self, tr: Transition, logp: float):
        self.states.append(tr.state)
        self.actions.append(tr.action)
        self.rewards.append(tr.reward)
        self.dones.append(tr.done)
        self.logps.append(logp)

    def __len__(self):
        return len(self.actions)


class PPOAgent:
    kind = "ppo"

    def __init__(self, state_dim: int, n_actions: int, config: PPOConfig | None = None, seed: int = 0):
        self.config = config or PPOConfig()
        self.state_dim, self.n_actions = state_dim, n_actions
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0]))
        h = self.config.hidden
        self.actor = nc.mlp([state_dim, h, n_actions], init_rng, zero_last=True)
        self.critic = nc.mlp([state_dim, h, 1], init_rng, zero_last=True)
        self.old_actor = self.actor.copy()
        self.actor_opt = nc.Adam(self.actor, lr=self.config.lr, weight_decay=self.config.weight_decay)
        self.critic_opt = nc.Adam(self.critic, lr=self.config.critic_lr, weight_decay=self.config.weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
        self.updates = 0

    _check_states = DQNAgent._check_states

    def scores(self, states) -> np.ndarray:
        logits = self.actor.forward(self._check_states(states), "infer")[0].astype(np.float64)
        return nc.softmax(logits)

    def action_scores(self, state) -> np.ndarray:
        return self.scores(state)[0]

    def act(self, state):
        """Sample from the frozen old policy; returns (action, log-prob)."""
        logits = self.old_actor.forward(self._check_states(state), "infer")[0][0].astype(np.float64)
        logp = logits - logits.max()
        logp -= np.log(np.exp(logp).sum())
        a = int(self.rng.choice(self.n_actions, p=np.exp(logp)))
        return a, float(logp[a])

    def values(self, states) -> np.ndarray:
        return self.critic.forward(self._check_states(states), "infer")[0][:, 0].astype(np.float64)


def ppo_returns(rollout: Rollout, gamma: float) -> np.ndarray:
    g = np.zeros(len(rollout))
    running = 0.0
    for t in reversed(range(len(rollout))):
        if rollout.dones[t]:
            running = 0.0
        running = rollout.rewards[t] + gamma * running
        g[t] = running
    return g


def ppo_advantage(agent: PPOAgent, rollout: Rollout, normalize: bool = True):
    """Returns-to-go minus the critic's value (``r - V(s)`` for one-step
    episodes), standardised per batch when it has more than one entry."""
    returns = ppo_returns(rollout, agent.config.gamma)
    adv = returns - agent.values(np.stack(rollout.states))
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def ppo_clip_objective(ratio, advantage, eps: float = 0.2):
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


def surrogate_and_grad(logits, actions, old_logp, advantages, clip: float = 0.2,
                       entropy_coef: float = 0.01):
    """Mean of clipped surrogate plus entropy bonus over a minibatch, and its
    gradient with respect to the actor logits."""
    logp_all = nc.log_softmax(np.asarray(logits, dtype=np.float64))
    m = len(logp_all)
    rows = np.arange(m)
    pi = np.exp(logp_all)
    ratio = np.exp(logp_all[rows, actions] - old_logp)
    a = np.asarray(advantages, dtype=np.float64)
    entropy = -(pi * logp_all).sum(axis=1)
    obj = float(np.mean(ppo_clip_objective(ratio, a, clip) + entropy_coef * entropy))
    # d surr / d logp_a is ratio*A where the unclipped branch is the min, else 0
    unclipped = ratio * a <= np.clip(ratio, 1 - clip, 1 + clip) * a
    g_logp = np.where(unclipped, ratio * a, 0.0)
    onehot = np.zeros_like(pi)
    onehot[rows, actions] = 1.0
    d_surr = g_logp[:, None] * (onehot - pi)
    d_ent = -pi * (logp_all + entropy[:, None])
    return obj, ((d_surr + entropy_coef * d_ent) / m).astype(np.asarray(logits).dtype)


def ppo_update(agent: PPOAgent, rollout: Rollout, epochs: int | None = None):
    """Clipped-surrogate ascent for the actor and squared-error descent for
    the critic over shuffled minibatches; re-snapshots the old policy.
    Returns mean (actor objective, critic loss) over the last epoch."""
    cfg = agent.config
    epochs = cfg.epochs if epochs is None else epochs
    adv, returns = ppo_advantage(agent, rollout)
    states = agent._check_states(np.stack(rollout.states))
    actions = np.asarray(rollout.actions)
    old_logp = np.asarray(rollout.logps, dtype=np.float64)
    n = len(rollout)
    actor_obj = critic_loss = 0.0
    for _ in range(epochs):
        order = agent.rng.permutation(n)
        objs, vlosses = [], []
        for i in range(0, n, cfg.minibatch):
            idx = order[i:i + cfg.minibatch]
            m = len(idx)
            logits, cache = agent.actor.forward(states[idx], "train")
            obj, dlogits = surrogate_and_grad(logits, actions[idx], old_logp[idx], adv[idx],
                                              cfg.clip, cfg.entropy_coef)
            objs.append(obj)
            agent.actor.backward(cache, -dlogits)  # ascent
            agent.actor_opt.step()

            v, vcache = agent.critic.forward(states[idx], "train")
            err = v[:, 0].astype(np.float64) - returns[idx]
            vlosses.append(float(np.mean(err ** 2)))
            agent.critic.backward(vcache, (2.0 * err / m)[:, None].astype(v.dtype))
            agent.critic_opt.step()
        actor_obj, critic_loss = float(np.mean(objs)), float(np.mean(vlosses))
    agent.old_actor = agent.actor.copy()
    agent.updates += 1
    return actor_obj, critic_loss


# --- training loop ---------------------------------------------------------

@dataclass
class RewardLog:
    episodes: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    exploration: list = field(default_factory=list)
    window: int = 100

    def moving_average(self) -> np.ndarray:
        r = np.asarray(self.rewards, dtype=np.float64)
        c = np.cumsum(np.r_[0.0, r])
        idx = np.arange(1, len(r) + 1)
        lo = np.maximum(0, idx - self.window)
        return (c[idx] - c[lo]) / (idx - lo)

    def write_csv(self, path) -> None:
        ma = self.moving_average()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "mean_reward", "exploration_rate"])
            for e, m, x in zip(self.episodes, ma, self.exploration):
                w.writerow([e, f"{m:.8f}", f"{x:.6f}"])


def _epsilon(cfg: DQNConfig, episode: int, episodes: int) -> float:
    decay = max(1, int(cfg.eps_decay_frac * episodes))
    frac = min(1.0, episode / decay)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def train_agent(agent, env, episodes: int, seed: int = 0, log_window: int = 100) -> RewardLog:
    """Run ``episodes`` episodes, cycling through the env's samples in a
    seeded order; each episode lasts ``env.horizon`` steps.

    DQN explores epsilon-greedily into its replay buffer and updates once per
    step; PPO collects ``rollout_size`` steps between updates. The log's
    exploration column is epsilon (DQN) or the normalised policy entropy of
    the visited states (PPO).
    """
    if env.n_samples == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    log = RewardLog(window=log_window)
    order = rng.permutation(env.n_samples)
    rollout = Rollout()
    entropy_norm = math.log(agent.n_actions) if agent.n_actions > 1 else 1.0
    for ep in range(episodes):
        pos = ep % env.n_samples
        if pos == 0 and ep > 0:
            order = rng.permutation(env.n_samples)
        state = env.reset(int(order[pos]))
        total, explore = 0.0, 0.0
        for _ in range(env.horizon):
            if agent.kind == "dqn":
                explore = _epsilon(agent.config, ep, episodes)
                action = agent.act(state, explore)
                tr = env.step(action)
                agent.remember(tr)
                if len(agent.buffer) >= agent.config.batch_size:
                    dqn_update(agent, agent.sample())
            else:
                action, logp = agent.act(state)
                p = agent.action_scores(state)
                explore = float(-(p * np.log(p + 1e-12)).sum() / entropy_norm)
                tr = env.step(action)
                rollout.add(tr, logp)
                if len(rollout) >= agent.config.rollout_size:
                    ppo_update(agent, rollout)
                    rollout = Rollout()
            total += tr.reward
            state = tr.next_state
            if tr.done:
                break
        log.episodes.append(ep + 1)
        log.rewards.append(total)
        log.exploration.append(explore)
    return log


def action_scores(agent, state) -> np.ndarray:
    return agent.action_scores(state)


# --- checkpoints -----------------------------------------------------------

def save_agent(agent, path, meta: dict | None = None) -> None:
    nets = {"q": agent.q, "target": agent.target} if agent.kind == "dqn" else {
        "actor": agent.actor, "critic": agent.critic}
    nc.save_checkpoint(path, nets, kind=agent.kind, step=agent.updates, meta={
        "config": asdict(agent.config), "state_dim": agent.state_dim,
        "n_actions": agent.n_actions, **(meta or {})})


def load_agent(path):
    """Returns ``(agent, meta)``; the agent kind comes from the checkpoint header."""
    nets, kind, step, meta = nc.load_checkpoint(path)
    if kind == "dqn":
        agent = DQNAgent(meta["state_dim"], meta["n_actions"], DQNConfig(**meta["config"]))
        agent.q, agent.target = nets["q"], nets["target"]
        agent.opt = nc.Adam(agent.q, lr=agent.config.lr, weight_decay=agent.config.weight_decay)
    elif kind == "ppo":
        agent = PPOAgent(meta["state_dim"], meta["n_actions"], PPOConfig(**meta["config"]))
        agent.actor, agent.critic = nets["actor"], nets["critic"]
        agent.old_actor = agent.actor.copy()
        agent.actor_opt = nc.Adam(agent.actor, lr=agent.config.lr, weight_decay=agent.config.weight_decay)
        agent.critic_opt = nc.Adam(agent.critic, lr=agent.config.critic_lr, weight_decay=agent.config.weight_decay)
    else:
        raise nc.CheckpointError(f"{path}: not an agent checkpoint (kind {kind!r})")
    agent.updates = step
    return agent, meta


def make_agent(kind: str, state_dim: int, n_actions: int, seed: int = 0, **overrides):
    if kind == "dqn":
        return DQNAgent(state_dim, n_actions, DQNConfig(**overrides), seed)
    if kind == "ppo":
        return PPOAgent(state_dim, n_actions, PPOConfig(**overrides), seed)
    raise ValueError(f"unknown agent kind {kind!r}")
