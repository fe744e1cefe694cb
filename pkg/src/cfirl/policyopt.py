"""Optimal candidate policy for a reward ``R(h, a) = w . phi(h, a)``, by recurrent
Q-learning over the batch histories and their counterfactual extensions."""

import numpy as np

from .errors import InvalidArgument
from .policies import QPolicy, greedy_probs
from .tdlearn import TDHyper, TDRun, encoder_for

N_ACTIONS = 2


class CandidatePolicy(QPolicy):
    """Deterministic greedy policy of a Q-network; ties go to action 0."""

    kind = "greedy"

    def __init__(self, q_net, config, reward_weights, memoryless=False, curve=None):
        super().__init__(q_net, config, kappa=None, memoryless=memoryless)
        self.reward_weights_used = np.asarray(reward_weights, dtype=np.float64)
        self.curve = curve or []

    @property
    def q_net(self):
        return self.net


class _QRun(TDRun):
    name = "policyopt"

    def __init__(self, cf, w, hyper, seed, gamma):
        super().__init__(cf, encoder_for(cf), N_ACTIONS, hyper, seed, gamma)
        self.R = cf.phi @ w  # (P, 2)

    def reward(self):
        return self.R[..., None]

    def bootstrap(self, ext):
        return ext.max(axis=-1)[..., None]

    def choose(self, rng, eps, rows, pred_all):
        B = len(rows)
        explore = rng.random(B) < eps
        random_a = rng.integers(0, 2, size=B)
        return np.where(explore, random_a, np.argmax(greedy_probs(pred_all), axis=1))

    def select(self, pred_all, actions):
        return pred_all[np.arange(len(actions)), actions][:, None]

    def scatter(self, grad, actions, out_dim):
        g = np.zeros((len(actions), out_dim))
        g[np.arange(len(actions)), actions] = grad[:, 0]
        return g

    def loss(self, pred, y):
        err = pred - y
        return float(np.mean(err**2)), 2.0 * err / len(err)


def optimize_policy(weights, dataset, fmap, gamma, hyper=TDHyper(), seed=0, table=None):
    """Greedy policy of a Q-network fitted by TD with ``max`` bootstrapping."""
    w = np.asarray(getattr(weights, "w", weights), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(w)):
        raise InvalidArgument("reward weights must be finite")
    cf = table if table is not None else fmap.table(dataset)
    if w.shape[0] != cf.phi.shape[-1]:
        raise InvalidArgument(f"expected {cf.phi.shape[-1]} reward weights, got {w.shape[0]}")
    run = _QRun(cf, w, hyper, seed, gamma)
    net = run.run()
    return CandidatePolicy(net, cf.config, w, memoryless=cf.memoryless, curve=run.curve)


def action_frequency(policy, table):
    """Pooled P(treat) of ``policy`` over the decision points of ``table``."""
    pre, _ = policy.table_probs(table)
    return float(pre[:, 1].mean())


__all__ = ["CandidatePolicy", "optimize_policy", "action_frequency", "TDHyper"]
