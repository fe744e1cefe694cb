"""Synthetic expert: deep recurrent Q-learning against the true reward, then a
stochastic, history-dependent logging policy derived from the Q-network."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import seqnet
from .errors import InvalidArgument, NumericFailure
from .histories import HISTORY_INPUT_DIM, Encoder, net_on_histories
from .oncosim import RewardWeights, advance, draw_noise, normalized_features, termination_code
from .policies import QPolicy, logit_probs
from .rng import derive_rng, derive_seed


@dataclass(frozen=True)
class QLearningHyper:
    """Deep recurrent Q-learning settings; defaults follow the expert table of the method."""

    hidden_dim: int = 128
    batch_size: int = 256
    learning_rate: float = 1e-3
    target_sync: int = 200
    replay_capacity: int = 10000
    eps_max: float = 0.9
    eps_min: float = 0.0
    eps_decay: float = 5e-5
    iterations: int = 40000

    def scaled(self, budget):
        """Scale the iteration count; the exploration decay is stretched to match."""
        if budget <= 0:
            raise InvalidArgument("budget must be positive")
        iters = int(round(self.iterations * budget))
        return dataclasses.replace(self, iterations=iters, eps_decay=self.eps_decay / budget)

    def epsilon(self, i):
        return max(self.eps_min, self.eps_max - self.eps_decay * i)


class ReplayBuffer:
    """FIFO transition memory.

    Each entry keeps the encoded next history ``h_{t+1}`` (``t+2`` steps); the
    current history is its prefix, so one stored sequence serves both the
    online and the target network.
    """

    def __init__(self, capacity, max_horizon, input_dim=HISTORY_INPUT_DIM):
        if capacity < 1:
            raise InvalidArgument("replay capacity must be >= 1")
        self.capacity = capacity
        self.seqs = np.zeros((capacity, max_horizon + 1, input_dim))
        self.t = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, seq, t, action, reward, terminal):
        i = self._next
        self.seqs[i] = 0.0
        self.seqs[i, : t + 2] = seq[: t + 2]
        self.t[i], self.action[i], self.reward[i], self.terminal[i] = t, action, reward, terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, batch_size):
        idx = rng.integers(0, self.size, size=batch_size)
        L = int(self.t[idx].max()) + 2
        return self.seqs[idx, :L], self.t[idx], self.action[idx], self.reward[idx], self.terminal[idx]


def q_targets(rewards, terminal, next_q, gamma):
    """``r`` on terminal transitions, ``r + gamma * max_a' Q(h', a')`` otherwise."""
    return np.where(terminal, rewards, rewards + gamma * np.max(next_q, axis=-1))


@dataclass
class TrainingCurve:
    rows: list = dataclasses.field(default_factory=list)
    header: tuple = ("iteration", "epsilon", "loss", "episodes", "mean_return_last_50")


class _Episode:
    """One live training episode, stepped with the current online network."""

    def __init__(self, config, seed, index, encoder):
        self.config = config
        self.noise = draw_noise(config, seed, [index], stream="expert.episode")
        p = config.p
        self.x_buf = np.full(p, self.noise.x0[0])
        self.z_buf = np.full(p, self.noise.z0[0])
        self.a_buf = np.zeros(p)
        self.t = 0
        self.encoder = encoder
        self.seq = np.zeros((config.max_horizon + 1, encoder.input_dim))
        self.seq[0] = encoder.step_features(self.x_buf[-1], self.z_buf[-1], 0.0, 0)
        self.ret = 0.0

    def step(self, action, weights, gamma):
        cfg, t = self.config, self.t
        self.a_buf = np.append(self.a_buf[1:], action)
        _, _, x, z = advance(cfg, self.x_buf, self.z_buf, self.a_buf, self.noise.eps[0, t], self.noise.eta[0, t])
        reward = float(normalized_features(cfg, x, z) @ weights)
        self.ret += gamma**t * reward
        self.x_buf = np.append(self.x_buf[1:], x)
        self.z_buf = np.append(self.z_buf[1:], z)
        self.seq[t + 1] = self.encoder.step_features(x, z, action, t + 1)
        self.t = t + 1
        terminal = int(termination_code(cfg, x, z, t + 1)) >= 0
        return reward, terminal


def train_expert(config, weights, hyper=QLearningHyper(), seed=0, gamma=None, curve=None):
    """Train a recurrent Q-network by epsilon-greedy interaction with the simulator.

    One environment step and one minibatch update per iteration, once the
    replay memory holds a full batch.  Returns the online network.
    """
    if not isinstance(weights, RewardWeights):
        weights = RewardWeights(tuple(weights))
    if np.abs(weights.vector).sum() > 1.0 + 1e-12:
        raise InvalidArgument("reward weights must satisfy ||w||_1 <= 1")
    gamma = weights.gamma if gamma is None else gamma
    w = weights.vector
    encoder = Encoder(config)
    net = seqnet.init_network(derive_seed(seed, "expert.net"), encoder.input_dim, hyper.hidden_dim, 2)
    if hyper.iterations <= 0:
        return net
    target = seqnet.copy_params(net)
    opt = seqnet.OptimizerState.for_params(net, hyper.learning_rate)
    replay = ReplayBuffer(hyper.replay_capacity, config.max_horizon, encoder.input_dim)
    rng = derive_rng(seed, "expert.train")

    n_episodes = 0
    episode = _Episode(config, seed, n_episodes, encoder)
    h = np.zeros(hyper.hidden_dim)
    returns = []
    loss = float("nan")
    for i in range(hyper.iterations):
        eps = hyper.epsilon(i)
        h = seqnet.step(net, episode.seq[episode.t], h)
        if rng.random() < eps:
            action = int(rng.integers(0, 2))
        else:
            q = seqnet.head(net, h)
            action = int(q[1] > q[0])
        t = episode.t
        reward, terminal = episode.step(action, w, gamma)
        replay.add(episode.seq, t, action, reward, terminal)
        if terminal:
            returns.append(episode.ret)
            n_episodes += 1
            episode = _Episode(config, seed, n_episodes, encoder)
            h = np.zeros(hyper.hidden_dim)

        if len(replay) >= hyper.batch_size:
            seqs, ts, acts, rews, terms = replay.sample(rng, hyper.batch_size)
            B = len(ts)
            rows = np.arange(B)
            q_next, _ = seqnet.forward(target, seqs, lengths=ts + 2)
            y = q_targets(rews, terms, q_next[rows, ts + 1], gamma)
            q, cache = seqnet.forward(net, seqs[:, : int(ts.max()) + 1], lengths=ts + 1)
            err = q[rows, ts, acts] - y
            loss = float(np.mean(err**2))
            if not np.isfinite(loss):
                raise NumericFailure(f"expert Q-learning diverged at iteration {i}", iteration=i)
            dq = np.zeros_like(q)
            dq[rows, ts, acts] = 2.0 * err / B
            seqnet.optimizer_step(net, seqnet.backward(net, cache, dq), opt)
            if (i + 1) % hyper.target_sync == 0:
                target = seqnet.copy_params(net)
        if curve is not None and (i % 500 == 0 or i == hyper.iterations - 1):
            recent = returns[-50:]
            curve.rows.append((i, eps, loss, n_episodes, float(np.mean(recent)) if recent else float("nan")))
    return net


class ExpertPolicy(QPolicy):
    """The logging policy: P(treat | h) = sigmoid(kappa * (Q(h,1) - Q(h,0)))."""

    def __init__(self, q_net, config, kappa):
        if kappa < 0:
            raise InvalidArgument("kappa must be nonnegative")
        super().__init__(q_net, config, kappa=float(kappa))

    @property
    def q_net(self):
        return self.net

    action_count = 2


def logging_policy(q_net, config, kappa=5.0):
    return ExpertPolicy(q_net, config, kappa)


def greedy_policy(q_net, config):
    return QPolicy(q_net, config, kappa=None)


def action_probabilities(policy, history):
    """``[P(a=0 | h), P(a=1 | h)]`` for a single :class:`~cfirl.histories.History`."""
    q = net_on_histories(policy.net, policy.encoder, [history])[0]
    return policy.probs_from_q(q)


def expert_action(policy, history, rng):
    p1 = action_probabilities(policy, history)[1]
    return int(rng.random() < p1)


__all__ = [
    "QLearningHyper",
    "ReplayBuffer",
    "TrainingCurve",
    "ExpertPolicy",
    "train_expert",
    "logging_policy",
    "greedy_policy",
    "expert_action",
    "action_probabilities",
    "q_targets",
    "logit_probs",
]
