"""History-dependent policies over the two actions {0: no treatment, 1: treat}.

Every policy can be driven step by step during rollouts (``start`` /
``observe``) and evaluated in bulk on the decision points of a dataset and on
their counterfactual one-step extensions (``table_probs``).
"""

import numpy as np

from . import seqnet
from .histories import Encoder, extension_outputs
from .rng import derive_rng

N_ACTIONS = 2


def greedy_probs(q):
    """One-hot argmax over the last axis; ties go to action 0."""
    q = np.asarray(q)
    treat = q[..., 1] > q[..., 0]
    return np.stack([~treat, treat], axis=-1).astype(np.float64)


def logit_probs(q, kappa):
    """P(treat) = sigmoid(kappa * (Q(h,1) - Q(h,0)))."""
    q = np.asarray(q)
    z = kappa * (q[..., 1] - q[..., 0])
    # Each side computed directly, so a tiny probability is not lost to 1 - p.
    with np.errstate(over="ignore"):
        return np.stack([1.0 / (1.0 + np.exp(z)), 1.0 / (1.0 + np.exp(-z))], axis=-1)


class Policy:
    memoryless = False

    def start(self, n, seed=0):
        return None

    def observe(self, state, x, z, a_prev, s):
        raise NotImplementedError

    def table_probs(self, cf):
        """``(P, 2)`` probabilities at each decision point of ``cf.prefix`` and
        ``(P, 2, 2)`` at its extensions ``[row, action taken, :]``."""
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, p_treat):
        self.p_treat = float(p_treat)

    def _probs(self, shape):
        out = np.empty(shape + (N_ACTIONS,))
        out[..., 0] = 1.0 - self.p_treat
        out[..., 1] = self.p_treat
        return out

    def observe(self, state, x, z, a_prev, s):
        return self._probs(np.shape(x)), state

    def table_probs(self, cf):
        P = cf.prefix.size
        return self._probs((P,)), self._probs((P, N_ACTIONS))

    def __repr__(self):
        return f"ConstantPolicy(p_treat={self.p_treat})"


def always_treat():
    return ConstantPolicy(1.0)


def never_treat():
    return ConstantPolicy(0.0)


def uniform_random():
    return ConstantPolicy(0.5)


class QPolicy(Policy):
    """Policy read off a recurrent Q-network.

    ``kappa=None`` gives the deterministic greedy policy; a finite ``kappa``
    gives the sigmoid-of-advantage logging policy.
    """

    def __init__(self, net, config, kappa=None, memoryless=False):
        self.net = net
        self.config = config
        self.kappa = kappa
        self.memoryless = memoryless
        self.encoder = Encoder(config, memoryless)

    def probs_from_q(self, q):
        return greedy_probs(q) if self.kappa is None else logit_probs(q, self.kappa)

    def start(self, n, seed=0):
        return np.zeros((n, self.net.hidden_dim))

    def observe(self, state, x, z, a_prev, s):
        inp = self.encoder.step_features(x, z, a_prev, s)
        h = seqnet.step(self.net, inp, np.zeros_like(state) if self.memoryless else state)
        return self.probs_from_q(seqnet.head(self.net, h)), h

    def q_values(self, cf):
        q, hidden = cf.prefix.outputs(self.net, self.encoder)
        q_next = extension_outputs(self.net, hidden, cf.next_inputs(self.encoder))
        return q, q_next

    def table_probs(self, cf):
        q, q_next = self.q_values(cf)
        return self.probs_from_q(q), self.probs_from_q(q_next)


class MixturePolicy(Policy):
    """Picks component ``i`` with probability ``lambdas[i]`` once per trajectory."""

    def __init__(self, policies, lambdas):
        self.policies = list(policies)
        self.lambdas = np.asarray(lambdas, dtype=np.float64)

    def start(self, n, seed=0):
        rng = derive_rng(seed, "mixture.components")
        p = np.clip(self.lambdas, 0.0, None)
        comp = rng.choice(len(self.policies), size=n, p=p / p.sum())
        return comp, [pol.start(n, seed) for pol in self.policies]

    def observe(self, state, x, z, a_prev, s):
        comp, substates = state
        out = np.zeros(np.shape(x) + (N_ACTIONS,))
        new_states = []
        for i, (pol, sub) in enumerate(zip(self.policies, substates)):
            probs, sub = pol.observe(sub, x, z, a_prev, s)
            mask = comp == i
            out[mask] = probs[mask]
            new_states.append(sub)
        return out, (comp, new_states)

    def table_probs(self, cf):
        pre = np.zeros((cf.prefix.size, N_ACTIONS))
        ext = np.zeros((cf.prefix.size, N_ACTIONS, N_ACTIONS))
        for lam, pol in zip(self.lambdas, self.policies):
            if lam > 0:
                a, b = pol.table_probs(cf)
                pre += lam * a
                ext += lam * b
        return pre, ext
