"""History encoding shared by every recurrent model.

A history ``h_t = (x_0, a_0, ..., a_{t-1}, x_t)`` becomes a length ``t+1``
input sequence.  Step ``s`` is encoded as::

    [x_s / x_max, z_s / z_max, a_{s-1}, s / max_horizon]      (a_{-1} = 0)

A *memoryless* encoder sees only the current covariates, ``[x_t/x_max,
z_t/z_max]``, as a length-1 sequence; it backs the MB(x)-style ablation.
"""

from dataclasses import dataclass

import numpy as np

from . import seqnet
from .errors import InvalidArgument

HISTORY_INPUT_DIM = 4
MEMORYLESS_INPUT_DIM = 2


@dataclass(frozen=True)
class History:
    covariates: np.ndarray  # (t+1, 2)
    actions: np.ndarray  # (t,)

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64).reshape(-1, 2)
        act = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if len(cov) != len(act) + 1:
            raise InvalidArgument("a history needs exactly one more covariate row than actions")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "actions", act)

    @property
    def t(self):
        return len(self.actions)

    def extend(self, action, x, z):
        return History(np.vstack([self.covariates, [[x, z]]]), np.append(self.actions, int(action)))


class Encoder:
    def __init__(self, config, memoryless=False):
        self.config = config
        self.memoryless = memoryless
        self.input_dim = MEMORYLESS_INPUT_DIM if memoryless else HISTORY_INPUT_DIM

    def step_features(self, x, z, a_prev, s):
        x = np.asarray(x, dtype=np.float64)
        cols = [x / self.config.x_max, np.asarray(z, dtype=np.float64) / self.config.z_max]
        if not self.memoryless:
            cols.append(np.broadcast_to(np.asarray(a_prev, dtype=np.float64), x.shape))
            cols.append(np.broadcast_to(np.asarray(s, dtype=np.float64) / self.config.max_horizon, x.shape))
        return np.stack(cols, axis=-1)

    def trajectory_inputs(self, covariates, actions):
        """Full-history encoding of every step: ``(N, L, 4)`` for ``(N, L, 2)`` covariates."""
        covariates = np.asarray(covariates, dtype=np.float64)
        actions = np.asarray(actions)
        N, L, _ = covariates.shape
        a_prev = np.zeros((N, L))
        a_prev[:, 1:] = actions[:, : L - 1]
        s = np.broadcast_to(np.arange(L, dtype=np.float64), (N, L))
        return Encoder(self.config, memoryless=False).step_features(covariates[..., 0], covariates[..., 1], a_prev, s)

    def encode(self, history):
        """Input sequence the network sees for ``history``: ``(t+1, I)`` or ``(1, I)``."""
        cov = history.covariates
        if self.memoryless:
            return self.step_features(cov[-1:, 0], cov[-1:, 1], 0, 0)
        return self.trajectory_inputs(cov[None], history.actions[None])[0]


def net_on_histories(net, encoder, histories):
    """Network outputs at the end of each history, ``(len(histories), O)``."""
    if not histories:
        return np.zeros((0, net.output_dim))
    seqs = [encoder.encode(h) for h in histories]
    lengths = np.array([len(s) for s in seqs])
    batch = np.zeros((len(seqs), lengths.max(), encoder.input_dim))
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s
    out, _ = seqnet.forward(net, batch, lengths=lengths)
    return out[np.arange(len(seqs)), lengths - 1]


class PrefixTable:
    """Every decision point ``(i, t)``, ``t < T_i``, of a set of trajectories.

    ``inputs`` holds the full-history encoding of each trajectory.  Rows of the
    flat arrays ``traj`` / ``t`` enumerate decision points in trajectory order.
    """

    def __init__(self, config, covariates, actions, lengths):
        self.config = config
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.inputs = Encoder(config).trajectory_inputs(self.covariates, self.actions)
        self.traj = np.concatenate([np.full(T, i) for i, T in enumerate(self.lengths)]).astype(np.int64)
        self.t = np.concatenate([np.arange(T) for T in self.lengths]).astype(np.int64)
        self.logged_actions = self.actions[self.traj, self.t]
        self.current = self.covariates[self.traj, self.t]

    @classmethod
    def from_dataset(cls, dataset, config=None):
        cov, act, lengths = dataset.to_arrays()
        return cls(config or dataset.sim_config, cov, act, lengths)

    @property
    def size(self):
        return len(self.traj)

    @property
    def n_trajectories(self):
        return len(self.lengths)

    def first_rows(self):
        """Flat row index of each trajectory's initial history."""
        return np.flatnonzero(self.t == 0)

    def batch_inputs(self, rows, encoder):
        """Padded network inputs and lengths for the histories at ``rows``."""
        if encoder.memoryless:
            cur = self.current[rows]
            return encoder.step_features(cur[:, 0], cur[:, 1], 0, 0)[:, None, :], np.ones(len(rows), dtype=np.int64)
        t = self.t[rows]
        L = int(t.max()) + 1
        return self.inputs[self.traj[rows], :L], t + 1

    def outputs(self, net, encoder, chunk=4096):
        """Network outputs at every decision point, plus the hidden states there.

        Hidden states are ``None`` for a memoryless encoder (every query starts
        from the zero state).
        """
        if encoder.memoryless:
            cur = self.current
            x = encoder.step_features(cur[:, 0], cur[:, 1], 0, 0)[:, None, :]
            out = np.concatenate(
                [seqnet.forward(net, x[s : s + chunk])[0][:, 0] for s in range(0, len(x), chunk)]
            ) if len(x) else np.zeros((0, net.output_dim))
            return out, None
        outs, hids = [], []
        N = self.n_trajectories
        for s in range(0, N, chunk):
            sl = slice(s, min(N, s + chunk))
            out, cache = seqnet.forward(net, self.inputs[sl], lengths=self.lengths[sl])
            outs.append(out)
            hids.append(seqnet.hidden_states(cache))
        L = self.inputs.shape[1]
        out = np.concatenate(outs) if outs else np.zeros((0, L, net.output_dim))
        hid = np.concatenate(hids) if hids else np.zeros((0, L, net.hidden_dim))
        return out[self.traj, self.t], hid[self.traj, self.t]


def extension_outputs(net, hidden, next_inputs):
    """Outputs on one-step extensions of stored histories.

    ``next_inputs`` is ``(P, A, I)``: the encoded new step for each candidate
    action.  ``hidden`` is ``(P, H)`` or ``None`` for memoryless encoders.
    """
    P, A, I = next_inputs.shape
    flat = next_inputs.reshape(P * A, I)
    if hidden is None:
        h = np.zeros((P * A, net.hidden_dim))
    else:
        h = np.repeat(hidden, A, axis=0)
    h_new = seqnet.step(net, flat, h)
    return seqnet.head(net, h_new).reshape(P, A, -1)
