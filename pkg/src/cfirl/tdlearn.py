"""Minibatch temporal-difference training over counterfactual one-step extensions.

Both counterfactual mu-learning and candidate-policy Q-learning fit a
recurrent network ``f(h, a)`` to targets of the form

    y(h, a) = r(h, a) + gamma * [h' not terminal] * V_target(h', a)

where ``h'`` is the model-predicted extension of a logged history ``h``.  The
target network only changes at sync points, so the full bootstrap table
``V_target`` over every (decision point, action) pair is computed once per
sync and minibatches just index into it.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import seqnet
from .errors import InvalidArgument, NumericFailure
from .histories import Encoder, extension_outputs
from .rng import derive_rng, derive_seed


@dataclass(frozen=True)
class TDHyper:
    hidden_dim: int = 128
    batch_size: int = 256
    learning_rate: float = 1e-3
    target_sync: int = 100
    eps_max: float = 0.9
    eps_min: float = 0.0
    eps_decay: float = 1e-5
    iterations: int = 20000

    def scaled(self, budget):
        """Scale the iteration count; the exploration decay is stretched to match."""
        if budget <= 0:
            raise InvalidArgument("budget must be positive")
        iters = int(round(self.iterations * budget))
        return dataclasses.replace(self, iterations=iters, eps_decay=self.eps_decay / budget)

    def epsilon(self, i):
        return max(self.eps_min, self.eps_max - self.eps_decay * i)


def encoder_for(source):
    """History encoder matching a feature map or counterfactual table."""
    return Encoder(source.config, memoryless=source.memoryless)


def table_outputs(net, cf, encoder):
    """``(outputs at each decision point (P, O), outputs at each extension (P, 2, O))``."""
    out, hidden = cf.prefix.outputs(net, encoder)
    return out, extension_outputs(net, hidden, cf.next_inputs(encoder))


class TDRun:
    """One TD fit.  Subclasses define the output layout, targets and loss."""

    name = "td"

    def __init__(self, cf, encoder, out_dim, hyper, seed, gamma):
        if not 0.0 <= gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")
        if cf.size == 0:
            raise InvalidArgument("no decision points to learn from")
        self.cf = cf
        self.encoder = encoder
        self.hyper = hyper
        self.gamma = gamma
        self.seed = seed
        self.net = seqnet.init_network(derive_seed(seed, self.name, "net"), encoder.input_dim, hyper.hidden_dim, out_dim)
        self.target = seqnet.copy_params(self.net)
        self.opt = seqnet.OptimizerState.for_params(self.net, hyper.learning_rate)
        self.trace = []
        self.curve = []

    # -- hooks
    def bootstrap(self, ext_out):
        """Target-net value of each extension, ``(P, 2, k)``."""
        raise NotImplementedError

    def reward(self):
        """Immediate term ``(P, 2, k)``."""
        raise NotImplementedError

    def choose(self, rng, eps, rows, pred_all):
        raise NotImplementedError

    def select(self, pred_all, actions):
        """Slice of the online output belonging to ``actions``: ``(B, k)``."""
        raise NotImplementedError

    def scatter(self, grad, actions, out_dim):
        raise NotImplementedError

    def loss(self, pred, y):
        raise NotImplementedError

    def monitor(self, i):
        return ()

    # -- loop
    def targets(self):
        _, ext = table_outputs(self.target, self.cf, self.encoder)
        live = ~self.cf.next_terminal
        return self.reward() + self.gamma * live[..., None] * self.bootstrap(ext)

    def run(self):
        hyper, cf = self.hyper, self.cf
        rng = derive_rng(self.seed, self.name, "train")
        y_table = self.targets()
        P = cf.size
        B = hyper.batch_size
        for i in range(hyper.iterations):
            rows = rng.integers(0, P, size=B)
            x, lengths = cf.prefix.batch_inputs(rows, self.encoder)
            out, cache = seqnet.forward(self.net, x, lengths=lengths)
            last = lengths - 1
            pred_all = out[np.arange(B), last]
            actions = self.choose(rng, hyper.epsilon(i), rows, pred_all)
            y = y_table[rows, actions]
            loss, dpred = self.loss(self.select(pred_all, actions), y)
            self.trace.append(loss)
            if not np.isfinite(loss):
                raise NumericFailure(
                    f"{self.name} diverged at iteration {i}", iteration=i, trace=self.trace[-20:]
                )
            dy = np.zeros_like(out)
            dy[np.arange(B), last] = self.scatter(dpred, actions, out.shape[-1])
            seqnet.optimizer_step(self.net, seqnet.backward(self.net, cache, dy), self.opt)
            if (i + 1) % hyper.target_sync == 0:
                self.target = seqnet.copy_params(self.net)
                y_table = self.targets()
                self.curve.append((i + 1, float(np.mean(self.trace[-hyper.target_sync :]))) + tuple(self.monitor(i)))
        return self.net


def epsilon_greedy(rng, eps, probs):
    """Random action with probability ``eps``, else a draw from ``probs`` ``(B, 2)``."""
    B = len(probs)
    explore = rng.random(B) < eps
    random_a = rng.integers(0, 2, size=B)
    on_policy = (rng.random(B) < probs[:, 1]).astype(np.int64)
    return np.where(explore, random_a, on_policy)
