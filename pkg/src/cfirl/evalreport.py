"""Policy evaluation in the true simulator and static report output.

CSV files
---------
``rewards.csv``   method, mean_cumulative_reward, stderr, rollouts
``accuracy.csv``  method, accuracy, stderr, test_trajectories
``weights.csv``   method, seed, w_1, w_2, l1_distance, signs_agree, ordering_agrees
``margins.csv``   method, seed, iteration, margin, distance, w_1, w_2, mu_1, mu_2

Reals are written with ``repr`` so reruns give byte-identical files.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cohort import run_policy
from .errors import InvalidArgument
from .oncosim import RewardWeights, draw_noise, normalized_features


@dataclass
class EvalResult:
    mean_cumulative_reward: float
    reward_stderr: float
    action_match_accuracy: float
    accuracy_stderr: float
    recovered_weights: np.ndarray = None
    margin_trace: list = field(default_factory=list)


def _stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))


def rollout_returns(policy, config, weights, gamma, M, seed):
    """Discounted true-reward return of each of ``M`` fresh rollouts."""
    if M < 1:
        raise InvalidArgument("need at least one rollout")
    w = weights.vector if isinstance(weights, RewardWeights) else np.asarray(weights, dtype=np.float64)
    sim = run_policy(policy, config, draw_noise(config, seed, range(M), stream="eval.rollout"), seed)
    H = config.max_horizon
    feats = normalized_features(config, sim.covariates[:, 1:, 0], sim.covariates[:, 1:, 1])
    live = np.arange(H)[None, :] < sim.lengths[:, None]
    return np.sum((feats @ w) * gamma ** np.arange(H) * live, axis=1)


def cumulative_reward(policy, config, weights, gamma, M=1000, seed=0):
    """Mean and standard error of the discounted return over ``M`` rollouts."""
    r = rollout_returns(policy, config, weights, gamma, M, seed)
    return float(r.mean()), _stderr(r)


def policy_actions_on(policy, covariates, actions, lengths, config, seed):
    """The evaluated policy's action at every logged history, ``(N, H)``.

    Stochastic policies draw from their own stream, independent of the
    expert's.
    """
    N, H = actions.shape
    rng_u = draw_noise(config, seed, range(N), stream="eval.match").uniforms
    state = policy.start(N, seed)
    a_prev = np.zeros(N)
    out = np.zeros((N, H), dtype=np.int64)
    for s in range(H):
        if not (lengths > s).any():
            break
        probs, state = policy.observe(state, covariates[:, s, 0], covariates[:, s, 1], a_prev, s)
        out[:, s] = rng_u[:, s] < probs[:, 1]
        a_prev = actions[:, s]
    return out


def per_trajectory_match(policy, covariates, actions, lengths, config, seed=0):
    pred = policy_actions_on(policy, covariates, actions, lengths, config, seed)
    live = np.arange(actions.shape[1])[None, :] < lengths[:, None]
    return ((pred == actions) & live).sum(axis=1) / lengths


def action_match_accuracy(policy, expert_policy, config, N=1000, seed=0):
    """Double mean over fresh expert trajectories of ``1[a_t == policy(h_t)]``."""
    if N < 1:
        raise InvalidArgument("need at least one test trajectory")
    sim = run_policy(expert_policy, config, draw_noise(config, seed, range(N), stream="eval.expert"), seed)
    acc = per_trajectory_match(policy, sim.covariates, sim.actions.astype(np.int64), sim.lengths, config, seed)
    return float(acc.mean()), _stderr(acc)


@dataclass
class WeightComparison:
    recovered: np.ndarray
    truth: np.ndarray
    l1_distance: float
    sign_agreement: list
    ordering_agrees: bool

    @property
    def full_agreement(self):
        return all(self.sign_agreement) and self.ordering_agrees

    def flags(self):
        out = [f"sign disagreement on component {i + 1}" for i, ok in enumerate(self.sign_agreement) if not ok]
        if not self.ordering_agrees:
            out.append("ordering disagreement (|w_1| vs |w_2|)")
        return out


def weight_report(recovered, truth):
    """Compare two l1-normalized weight vectors component by component."""
    r = np.asarray(getattr(recovered, "w", recovered), dtype=np.float64)
    t = np.asarray(getattr(truth, "w", truth), dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidArgument("weight vectors differ in length")
    signs = [bool(np.sign(a) == np.sign(b)) for a, b in zip(r, t)]
    order = bool(np.sign(abs(r[1]) - abs(r[0])) == np.sign(abs(t[1]) - abs(t[0]))) if len(r) >= 2 else True
    return WeightComparison(r, t, float(np.abs(r - t).sum()), signs, order)


# ------------------------------------------------------------------- output


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cfirl"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def plot_weights(path, points, truth):
    """Scatter of recovered l1-normalized weights; ``points`` maps label -> list of (w1, w2)."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    markers = ["o", "s", "^", "D", "v"]
    for (label, ws), m in zip(sorted(points.items()), markers * 3):
        ws = np.atleast_2d(np.asarray(ws, dtype=np.float64))
        if ws.size:
            ax.scatter(ws[:, 0], ws[:, 1], marker=m, label=label, alpha=0.8)
    ax.scatter([truth[0]], [truth[1]], marker="*", s=200, c="k", label="true weights")
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0, lw=0.5, c="grey")
    ax.axvline(0, lw=0.5, c="grey")
    ax.set_xlabel("w_1 (tumour volume)")
    ax.set_ylabel("w_2 (side effects)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_margins(path, traces, epsilon=None):
    """Margin ``t_k`` against iteration; ``traces`` maps label -> list of margins."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, tr in sorted(traces.items()):
        if len(tr):
            ax.plot(np.arange(1, len(tr) + 1), tr, marker="o", ms=3, label=label)
    if epsilon is not None:
        ax.axhline(epsilon, ls="--", c="grey", lw=0.8, label="epsilon")
    ax.set_yscale("log")
    ax.set_xlabel("iteration k")
    ax.set_ylabel("margin t_k")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


__all__ = [
    "EvalResult",
    "cumulative_reward",
    "rollout_returns",
    "action_match_accuracy",
    "per_trajectory_match",
    "weight_report",
    "WeightComparison",
    "write_csv",
    "read_csv",
    "plot_weights",
    "plot_margins",
]
