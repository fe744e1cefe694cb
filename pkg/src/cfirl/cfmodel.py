"""Counterfactual outcome model: phi(h, a) = E[Y_{t+1}[a] | h].

A recurrent dynamics network reads the history together with the action
about to be taken and predicts the next covariates.  The history-aware modes
share one input layout, step ``s`` being::

    [x_s / x_max, z_s / z_max, a_s, s / max_horizon]

so a counterfactual query for action ``a`` at time ``t`` is the hidden state
after ``t`` factual steps followed by one step with ``a_t`` replaced by ``a``.
``plain_memoryless`` sees only ``[x_t / x_max, z_t / z_max, a_t]``.

Time-dependent confounding is handled by inverse propensity weighting of
the regression loss (``iptw_history``); ``plain_history`` is the same model
fitted without weights.
"""

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from . import seqnet
from .errors import InvalidArgument, InvalidState, NumericFailure, OverlapViolation
from .histories import Encoder, History, PrefixTable
from .oncosim import termination_code
from .rng import derive_rng, derive_seed

MODES = ("iptw_history", "plain_history", "plain_memoryless")
CLI_MODES = {"iptw": "iptw_history", "plain-h": "plain_history", "plain-x": "plain_memoryless"}
DYNAMICS_INPUT_DIM = 4
MEMORYLESS_DYNAMICS_INPUT_DIM = 3
WEIGHT_CLIP = (0.1, 10.0)
FEATURE_DIM = 2


@dataclass(frozen=True)
class FitHyper:
    hidden_dim: int = 128
    batch_size: int = 128  # trajectories per minibatch
    learning_rate: float = 1e-3
    iterations: int = 4000

    def scaled(self, budget):
        if budget <= 0:
            raise InvalidArgument("budget must be positive")
        return dataclasses.replace(self, iterations=int(round(self.iterations * budget)))


def _train(net, inputs, lengths, grad_fn, hyper, rng, what):
    """Adam on minibatches of rows; ``grad_fn(rows, outputs) -> (loss, dY)``."""
    opt = seqnet.OptimizerState.for_params(net, hyper.learning_rate)
    n = len(lengths)
    trace = []
    for it in range(hyper.iterations):
        rows = rng.integers(0, n, size=min(hyper.batch_size, n))
        lens = lengths[rows]
        out, cache = seqnet.forward(net, inputs[rows, : int(lens.max())], lengths=lens)
        loss, dy = grad_fn(rows, out)
        trace.append(loss)
        if not np.isfinite(loss):
            raise NumericFailure(f"{what} training diverged at iteration {it}", iteration=it, trace=trace[-20:])
        seqnet.optimizer_step(net, seqnet.backward(net, cache, dy), opt)
    return trace


def _valid_mask(lengths, L):
    return lengths[:, None] > np.arange(L)[None, :]


# ---------------------------------------------------------------- propensity


@dataclass
class PropensityModel:
    """History -> P(a_t = 1 | h_t) through a sigmoid output."""

    net: seqnet.NetworkParams
    config: object
    train_trace: list = dataclasses.field(default_factory=list, repr=False)

    def treat_probability(self, prefix):
        """P(a=1 | h) at every decision point of a :class:`PrefixTable`."""
        logits, _ = prefix.outputs(self.net, Encoder(self.config))
        return _stable_sigmoid(logits[:, 0])

    def probability_of(self, history):
        seq = Encoder(self.config).encode(history)
        out, _ = seqnet.forward(self.net, seq)
        return float(_stable_sigmoid(out[-1, 0]))


def _stable_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def fit_propensity(dataset, hyper=FitHyper(), seed=0, force=False, threshold=0.01):
    """Cross-entropy fit of the logging policy's treatment probability.

    Refuses (``OverlapViolation``) when the audit reports overlap warnings,
    unless ``force`` is set, in which case it warns and carries on.
    """
    from .cohort import audit

    report = audit(dataset, threshold)
    if report.overlap_warnings:
        msg = f"overlap warnings at timesteps {report.overlap_warnings}; propensity weights would be unreliable"
        if not force:
            raise OverlapViolation(msg)
        warnings.warn(msg)
    config = dataset.sim_config
    cov, act, lengths = dataset.to_arrays()
    H = config.max_horizon
    inputs = Encoder(config).trajectory_inputs(cov[:, :H], act)
    targets = act.astype(np.float64)
    net = seqnet.init_network(derive_seed(seed, "propensity.net"), inputs.shape[2], hyper.hidden_dim, 1)

    def grad_fn(rows, out):
        L = out.shape[1]
        mask = _valid_mask(lengths[rows], L)
        a = targets[rows, :L]
        z = out[..., 0]
        count = mask.sum()
        loss = -np.sum(mask * (a * _log_sigmoid(z) + (1 - a) * _log_sigmoid(-z))) / count
        dy = ((_stable_sigmoid(z) - a) * mask / count)[..., None]
        return float(loss), dy

    trace = _train(net, inputs, lengths, grad_fn, hyper, derive_rng(seed, "propensity.train"), "propensity")
    return PropensityModel(net, config, trace)


def propensity_log_loss(model, dataset):
    """Mean held-out cross-entropy and the constant-0.5 baseline (``log 2``)."""
    prefix = PrefixTable.from_dataset(dataset)
    p = np.clip(model.treat_probability(prefix), 1e-12, 1 - 1e-12)
    a = prefix.logged_actions
    ll = -np.mean(a * np.log(p) + (1 - a) * np.log(1 - p))
    return float(ll), float(np.log(2.0))


def iptw_weights(model, dataset):
    """Stabilized per-timestep weights ``P(a) / e(a | h)``, clipped, shape ``(N, H)``.

    Entries past each trajectory's end are zero.
    """
    config = dataset.sim_config
    prefix = PrefixTable.from_dataset(dataset)
    p1 = model.treat_probability(prefix)
    a = prefix.logged_actions
    marginal = a.mean()
    num = np.where(a == 1, marginal, 1.0 - marginal)
    den = np.where(a == 1, p1, 1.0 - p1)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = num / den
    bad = np.flatnonzero(~np.isfinite(raw))
    if len(bad):
        r = bad[0]
        tid = dataset.trajectories[prefix.traj[r]].trajectory_id
        raise NumericFailure(f"non-finite propensity weight for trajectory {tid} at timestep {prefix.t[r]}")
    w = np.zeros((prefix.n_trajectories, config.max_horizon))
    w[prefix.traj, prefix.t] = np.clip(raw, *WEIGHT_CLIP)
    return w


# ------------------------------------------------------------------ dynamics


def dynamics_inputs(config, covariates, actions, memoryless=False):
    """Per-step inputs pairing each state with the action taken there."""
    covariates = np.asarray(covariates, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    cols = [covariates[..., 0] / config.x_max, covariates[..., 1] / config.z_max, actions]
    if not memoryless:
        s = np.broadcast_to(np.arange(covariates.shape[-2], dtype=np.float64), actions.shape)
        cols.append(s / config.max_horizon)
    return np.stack(cols, axis=-1)


def _scale(config):
    return np.array([config.x_max, config.z_max])


@dataclass
class DynamicsModel:
    """Predicts the next covariates for a history and a candidate action."""

    net: seqnet.NetworkParams
    mode: str
    config: object
    train_trace: list = dataclasses.field(default_factory=list, repr=False)

    @property
    def memoryless(self):
        return self.mode == "plain_memoryless"

    def _finish(self, normalized):
        return np.clip(normalized * _scale(self.config), 0.0, _scale(self.config))

    def predict_table(self, prefix, chunk=4096):
        """Clamped next covariates ``(P, 2 actions, 2)`` at every decision point."""
        cfg = self.config
        P = prefix.size
        cand = np.array([0.0, 1.0])
        if self.memoryless:
            cur = np.repeat(prefix.current[:, None, :], 2, axis=1)
            x = dynamics_inputs(cfg, cur, np.broadcast_to(cand, (P, 2)), memoryless=True).reshape(2 * P, 1, -1)
            out = np.concatenate([seqnet.forward(self.net, x[s : s + chunk])[0][:, 0] for s in range(0, len(x), chunk)])
            return self._finish(out.reshape(P, 2, 2))
        H = cfg.max_horizon
        inputs = dynamics_inputs(cfg, prefix.covariates[:, :H], prefix.actions)
        hs = []
        for s in range(0, prefix.n_trajectories, chunk):
            sl = slice(s, s + chunk)
            _, cache = seqnet.forward(self.net, inputs[sl], lengths=np.maximum(prefix.lengths[sl], 1))
            hs.append(seqnet.hidden_states(cache))
        hs = np.concatenate(hs)
        h_prev = np.zeros((P, self.net.hidden_dim))
        later = prefix.t > 0
        h_prev[later] = hs[prefix.traj[later], prefix.t[later] - 1]
        cur = np.repeat(prefix.current[:, None, :], 2, axis=1)
        t = np.repeat(prefix.t[:, None], 2, axis=1)
        step_in = np.stack(
            [cur[..., 0] / cfg.x_max, cur[..., 1] / cfg.z_max, np.broadcast_to(cand, (P, 2)), t / H], axis=-1
        )
        h_new = seqnet.step(self.net, step_in.reshape(2 * P, -1), np.repeat(h_prev, 2, axis=0))
        return self._finish(seqnet.head(self.net, h_new).reshape(P, 2, 2))

    def predict(self, history, action):
        cov = history.covariates
        acts = np.append(history.actions, action).astype(np.float64)
        if self.memoryless:
            x = dynamics_inputs(self.config, cov[-1:], acts[-1:], memoryless=True)
        else:
            x = dynamics_inputs(self.config, cov, acts)
        out, _ = seqnet.forward(self.net, x)
        return self._finish(out[-1])


def training_weights(dataset, propensity=None, mode="iptw_history"):
    """Per-sample loss weights ``(N, H)``: IPTW for ``iptw_history``, else 1 on valid steps."""
    mode = CLI_MODES.get(mode, mode)
    if mode == "iptw_history":
        return iptw_weights(propensity, dataset)
    _, _, lengths = dataset.to_arrays()
    return _valid_mask(lengths, dataset.sim_config.max_horizon).astype(np.float64)


def fit_dynamics(dataset, propensity=None, mode="iptw_history", hyper=FitHyper(), seed=0):
    """Weighted least squares on observed next covariates (normalized units)."""
    mode = CLI_MODES.get(mode, mode)
    if mode not in MODES:
        raise InvalidArgument(f"unknown dynamics mode {mode!r}; expected one of {MODES}")
    if mode == "iptw_history" and propensity is None:
        raise InvalidArgument("mode iptw_history needs a fitted propensity model")
    config = dataset.sim_config
    cov, act, lengths = dataset.to_arrays()
    H = config.max_horizon
    targets = cov[:, 1:] / _scale(config)
    weights = training_weights(dataset, propensity, mode)

    memoryless = mode == "plain_memoryless"
    inputs = dynamics_inputs(config, cov[:, :H], act, memoryless=memoryless)
    if memoryless:
        # Every (trajectory, step) pair becomes its own length-1 sample.
        valid = _valid_mask(lengths, H)
        inputs = inputs[valid][:, None, :]
        targets = targets[valid][:, None, :]
        weights = weights[valid][:, None]
        lengths = np.ones(len(inputs), dtype=np.int64)
        hyper = dataclasses.replace(hyper, batch_size=hyper.batch_size * int(np.ceil(valid.sum() / len(valid))))
    net = seqnet.init_network(derive_seed(seed, "dynamics.net", mode), inputs.shape[2], hyper.hidden_dim, 2)

    def grad_fn(rows, out):
        L = out.shape[1]
        w = weights[rows, :L] * _valid_mask(lengths[rows], L)
        err = out - targets[rows, :L]
        count = max(int(_valid_mask(lengths[rows], L).sum()), 1)
        loss = np.sum(w[..., None] * err**2) / count
        return float(loss), 2.0 * w[..., None] * err / count

    trace = _train(net, inputs, lengths, grad_fn, hyper, derive_rng(seed, "dynamics.train", mode), "dynamics")
    return DynamicsModel(net, mode, config, trace)


class OracleDynamics:
    """Noise-free simulator equations as a dynamics model (optionally biased).

    Used as the counterfactual ground truth in tests and diagnostics.
    """

    mode = "oracle"
    memoryless = False

    def __init__(self, config, bias=(0.0, 0.0)):
        self.config = config
        self.bias = np.asarray(bias, dtype=np.float64)

    def _predict(self, x_win, z_win, a_prev_sum, action):
        cfg = self.config
        s = a_prev_sum + action
        x = np.mean(x_win, axis=-1) + cfg.treat_coeff_x * s + cfg.drift_x + self.bias[0]
        z = np.mean(z_win, axis=-1) + cfg.treat_coeff_z * s + cfg.drift_z + self.bias[1]
        return np.stack([np.clip(x, 0, cfg.x_max), np.clip(z, 0, cfg.z_max)], axis=-1)

    def _windows(self, covariates, actions, t):
        """AR windows ending at step ``t`` for padded trajectory arrays."""
        p = self.config.p
        cov = np.concatenate([np.repeat(covariates[:, :1], p - 1, axis=1), covariates], axis=1)
        act = np.concatenate([np.zeros((len(actions), p - 1)), actions], axis=1)
        idx = t[:, None] + np.arange(p)[None, :]
        rows = np.arange(len(t))[:, None]
        win = cov[rows, idx]
        # Actions a_{t-p+1} .. a_{t-1}; the candidate a_t is added separately.
        prev = act[rows, idx[:, :-1]].sum(axis=1) if p > 1 else np.zeros(len(t))
        return win[..., 0], win[..., 1], prev

    def predict_table(self, prefix):
        traj, t = prefix.traj, prefix.t
        xw, zw, prev = self._windows(prefix.covariates[traj], prefix.actions[traj].astype(np.float64), t)
        return np.stack([self._predict(xw, zw, prev, a) for a in (0, 1)], axis=1)

    def predict(self, history, action):
        cov = history.covariates[None]
        acts = history.actions[None].astype(np.float64)
        acts = np.concatenate([acts, np.zeros((1, 1))], axis=1)
        xw, zw, prev = self._windows(cov, acts, np.array([history.t]))
        return self._predict(xw, zw, prev, action)[0]


# --------------------------------------------------------------- feature map


class CounterfactualTable:
    """Counterfactual one-step extensions of every decision point in ``prefix``."""

    def __init__(self, prefix, next_covariates, config, scale, memoryless):
        self.prefix = prefix
        self.next_covariates = next_covariates  # (P, 2, 2)
        self.config = config
        self.memoryless = memoryless
        self.phi = next_covariates / _scale(config) * scale
        t_next = np.repeat(prefix.t[:, None] + 1, 2, axis=1)
        self.next_terminal = termination_code(config, next_covariates[..., 0], next_covariates[..., 1], t_next) >= 0

    @property
    def size(self):
        return self.prefix.size

    def next_inputs(self, encoder):
        """Encoded new step of each extension for ``encoder``: ``(P, 2, I)``."""
        P = self.size
        nc = self.next_covariates
        a = np.broadcast_to(np.array([0.0, 1.0]), (P, 2))
        s = np.repeat(self.prefix.t[:, None] + 1, 2, axis=1)
        return encoder.step_features(nc[..., 0], nc[..., 1], a, s)


class FeatureMap:
    """phi(h, a): predicted next covariates, range-normalized and scaled by 1/sqrt(d)."""

    def __init__(self, dynamics, config=None):
        self.dynamics = dynamics
        self.config = config or dynamics.config
        self.scale = 1.0 / np.sqrt(FEATURE_DIM)

    @property
    def memoryless(self):
        return bool(self.dynamics.memoryless)

    def features(self, covariates):
        return np.asarray(covariates) / _scale(self.config) * self.scale

    def covariates(self, features):
        return np.asarray(features) / self.scale * _scale(self.config)

    def phi(self, history, action):
        f = self.features(self.dynamics.predict(history, action))
        assert np.linalg.norm(f) <= 1.0 + 1e-12, "feature map left the unit ball"
        return f

    def is_terminal(self, history):
        x, z = history.covariates[-1]
        return int(termination_code(self.config, x, z, history.t)) >= 0

    def next_history(self, history, action):
        if self.is_terminal(history):
            raise InvalidState("cannot extend a terminal history")
        x, z = self.dynamics.predict(history, action)
        return history.extend(action, x, z)

    def table(self, prefix):
        if not isinstance(prefix, PrefixTable):
            prefix = PrefixTable.from_dataset(prefix, self.config)
        nc = self.dynamics.predict_table(prefix)
        return CounterfactualTable(prefix, nc, self.config, self.scale, self.memoryless)


def phi(fmap, history, action):
    return fmap.phi(history, action)


def next_history(fmap, history, action):
    return fmap.next_history(history, action)


# ------------------------------------------------------------------- metrics


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def factual_rmse(dynamics, dataset):
    """RMSE (covariate units, pooled over x and z) of logged-action predictions."""
    prefix = PrefixTable.from_dataset(dataset)
    pred = dynamics.predict_table(prefix)[np.arange(prefix.size), prefix.logged_actions]
    observed = prefix.covariates[prefix.traj, prefix.t + 1]
    return _rmse(pred, observed)


def counterfactual_rmse(dynamics, dataset, oracle=None):
    """RMSE of action-flipped predictions against the noise-free simulator."""
    prefix = PrefixTable.from_dataset(dataset)
    oracle = oracle or OracleDynamics(dataset.sim_config)
    flipped = 1 - prefix.logged_actions
    rows = np.arange(prefix.size)
    return _rmse(dynamics.predict_table(prefix)[rows, flipped], oracle.predict_table(prefix)[rows, flipped])


__all__ = [
    "MODES",
    "CLI_MODES",
    "FitHyper",
    "PropensityModel",
    "DynamicsModel",
    "OracleDynamics",
    "FeatureMap",
    "CounterfactualTable",
    "History",
    "fit_propensity",
    "fit_dynamics",
    "propensity_log_loss",
    "iptw_weights",
    "training_weights",
    "dynamics_inputs",
    "phi",
    "next_history",
    "factual_rmse",
    "counterfactual_rmse",
]
