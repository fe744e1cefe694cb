"""Counterfactual mu-learning: off-policy feature expectations by TD over
model-predicted next histories.

The mu-network outputs ``2 * d`` numbers per history; ``mu(h, a)`` is the
slice ``[a * d, (a + 1) * d)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import seqnet
from .errors import InvalidArgument
from .tdlearn import TDHyper, TDRun, encoder_for, epsilon_greedy

N_ACTIONS = 2
CURVE_HEADER = ("iteration", "td_loss", "mu_1", "mu_2")
LOSSES = ("squared", "norm")


def expert_feature_expectations(dataset, fmap, gamma, table=None):
    """``(1/N) sum_i sum_t gamma^t phi(h_t, a_t)`` over the logged pairs."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")
    if dataset is None or len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    cf = table if table is not None else fmap.table(dataset)
    pre = cf.prefix
    phi = cf.phi[np.arange(pre.size), pre.logged_actions]
    disc = gamma ** pre.t.astype(np.float64)
    total = np.zeros((pre.n_trajectories, phi.shape[1]))
    np.add.at(total, pre.traj, disc[:, None] * phi)
    return total.mean(axis=0)


@dataclass
class MuNetwork:
    net: seqnet.NetworkParams
    target_net: seqnet.NetworkParams
    sync_period: int
    d: int
    memoryless: bool = False
    curve: list = field(default_factory=list, repr=False)

    def values(self, cf):
        """``mu(h, a)`` at every decision point of ``cf``: ``(P, 2, d)``."""
        out, _ = cf.prefix.outputs(self.net, encoder_for(cf))
        return out.reshape(len(out), N_ACTIONS, self.d)


class _MuRun(TDRun):
    name = "mulearn"

    def __init__(self, cf, policy, hyper, seed, gamma, loss="squared"):
        if loss not in LOSSES:
            raise InvalidArgument(f"unknown mu loss {loss!r}; expected one of {LOSSES}")
        self.loss_kind = loss
        self.d = cf.phi.shape[-1]
        super().__init__(cf, encoder_for(cf), N_ACTIONS * self.d, hyper, seed, gamma)
        self.pre_probs, self.ext_probs = policy.table_probs(cf)
        self.first = cf.prefix.first_rows()

    def reward(self):
        return self.cf.phi

    def bootstrap(self, ext):
        P = len(ext)
        mu_next = ext.reshape(P, N_ACTIONS, N_ACTIONS, self.d)
        return np.einsum("pab,pabd->pad", self.ext_probs, mu_next)

    def choose(self, rng, eps, rows, pred_all):
        return epsilon_greedy(rng, eps, self.pre_probs[rows])

    def select(self, pred_all, actions):
        B = len(actions)
        return pred_all.reshape(B, N_ACTIONS, self.d)[np.arange(B), actions]

    def scatter(self, grad, actions, out_dim):
        B = len(actions)
        g = np.zeros((B, N_ACTIONS, self.d))
        g[np.arange(B), actions] = grad
        return g.reshape(B, out_dim)

    def loss(self, pred, y):
        diff = pred - y
        B = len(diff)
        if self.loss_kind == "squared":
            sq = np.sum(diff**2, axis=1)
            return float(sq.mean()), 2.0 * diff / B
        # Plain Euclidean norm: a median-like fit that gives the few horizon
        # rows little pull, so it is kept only for comparison.
        norm = np.sqrt(np.sum(diff**2, axis=1))
        grad = diff / np.maximum(norm, 1e-12)[:, None] / B
        return float(norm.mean()), grad

    def estimate(self, net=None):
        """Closing estimator: ``(1/N) sum_i sum_a mu(h0_i, a) pi(a | h0_i)``."""
        net = net or self.net
        x, lengths = self.cf.prefix.batch_inputs(self.first, self.encoder)
        out, _ = seqnet.forward(net, x, lengths=lengths)
        mu0 = out[np.arange(len(self.first)), lengths - 1].reshape(-1, N_ACTIONS, self.d)
        return np.einsum("na,nad->d", self.pre_probs[self.first], mu0) / len(self.first)

    def monitor(self, i):
        return tuple(self.estimate())


def estimate_mu(policy, dataset, fmap, gamma, hyper=TDHyper(), seed=0, table=None, loss="squared"):
    """Feature expectations of ``policy`` from batch data.  Returns ``(mu, MuNetwork)``.

    ``loss`` is ``"squared"`` (squared distance to the target) or ``"norm"``.
    """
    cf = table if table is not None else fmap.table(dataset)
    run = _MuRun(cf, policy, hyper, seed, gamma, loss)
    run.run()
    mu = run.estimate()
    mnet = MuNetwork(run.net, run.target, hyper.target_sync, run.d, cf.memoryless, run.curve)
    return mu, mnet


__all__ = [
    "TDHyper",
    "MuNetwork",
    "CURVE_HEADER",
    "expert_feature_expectations",
    "estimate_mu",
]
