"""Batch observational datasets: generation, persistence and auditing.

File format (UTF-8, one JSON object per line)::

    {"format": "cfirl.dataset", "version": 1, "n_trajectories": N,
     "master_seed": ..., "policy_fingerprint": "...", "sim_config": {...}}
    {"id": 0, "termination_reason": "tumor_cleared",
     "covariates": [[x0, z0], [x1, z1], ...], "actions": [a0, a1, ...]}
    ...

Reals are written with 17 significant digits, which round-trips doubles
exactly; keys are always emitted in the order above.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import seqnet
from .errors import FormatError, InvalidArgument, VersionMismatch
from .oncosim import TERMINATION_CODES, BatchSimulator, SimConfig, Termination, draw_noise
from .policies import ConstantPolicy, QPolicy

FORMAT_NAME = "cfirl.dataset"
FORMAT_VERSION = 1


class ValidationError(FormatError):
    category = "validation-error"


@dataclass(eq=False)
class Trajectory:
    covariates: np.ndarray  # (T+1, 2) rows of (x, z)
    actions: np.ndarray  # (T,)
    trajectory_id: int
    termination_reason: Termination

    @property
    def T(self):
        return len(self.actions)

    def __eq__(self, other):
        return (
            isinstance(other, Trajectory)
            and self.trajectory_id == other.trajectory_id
            and self.termination_reason == other.termination_reason
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.actions, other.actions)
        )


@dataclass(eq=False)
class BatchDataset:
    trajectories: list
    sim_config: SimConfig
    policy_fingerprint: str
    master_seed: int
    _arrays: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ValidationError("dataset has no trajectories")

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        return (
            isinstance(other, BatchDataset)
            and self.sim_config == other.sim_config
            and self.policy_fingerprint == other.policy_fingerprint
            and self.master_seed == other.master_seed
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    def to_arrays(self):
        """Padded ``(covariates (N, H+1, 2), actions (N, H), lengths (N,))``."""
        if self._arrays is None:
            H = self.sim_config.max_horizon
            N = len(self)
            cov = np.zeros((N, H + 1, 2))
            act = np.zeros((N, H), dtype=np.int64)
            lengths = np.zeros(N, dtype=np.int64)
            for i, tr in enumerate(self.trajectories):
                T = tr.T
                cov[i, : T + 1] = tr.covariates
                # Pad past the end with the final covariates so encodings stay in range.
                cov[i, T + 1 :] = tr.covariates[-1]
                act[i, :T] = tr.actions
                lengths[i] = T
            self._arrays = (cov, act, lengths)
        return self._arrays

    def subset(self, indices):
        return BatchDataset(
            [self.trajectories[i] for i in indices], self.sim_config, self.policy_fingerprint, self.master_seed
        )

    def split(self, fraction=0.9):
        """Deterministic train/validation split by trajectory order."""
        n_train = int(round(len(self) * fraction))
        n_train = min(max(n_train, 1), len(self) - 1) if len(self) > 1 else 1
        train = self.subset(range(n_train))
        val = self.subset(range(n_train, len(self))) if n_train < len(self) else train
        return train, val


def policy_fingerprint(policy):
    h = hashlib.sha256()
    if isinstance(policy, QPolicy):
        h.update(seqnet.to_bytes(policy.net))
        h.update(repr((policy.kappa, policy.memoryless)).encode())
    elif isinstance(policy, ConstantPolicy):
        h.update(repr(policy).encode())
    else:
        h.update(type(policy).__name__.encode())
    return h.hexdigest()[:16]


def run_policy(policy, config, noise, seed=0):
    """Roll ``policy`` forward on every trajectory described by ``noise``.

    Stochastic actions use the pre-drawn uniforms, so row ``i``'s outcome
    does not depend on which other rows are simulated alongside it.
    """
    sim = BatchSimulator(config, noise)
    state = policy.start(sim.n, seed)
    a_prev = np.zeros(sim.n)
    for s in range(config.max_horizon):
        if sim.done:
            break
        probs, state = policy.observe(state, sim.x_buf[:, -1], sim.z_buf[:, -1], a_prev, s)
        actions = (noise.uniforms[:, s] < probs[:, 1]).astype(np.int64)
        sim.step(actions)
        a_prev = actions
    return sim


def _sim_to_trajectories(sim, ids):
    out = []
    for row, i in enumerate(ids):
        T = int(sim.lengths[row])
        out.append(
            Trajectory(
                sim.covariates[row, : T + 1].copy(),
                sim.actions[row, :T].astype(np.int64),
                int(i),
                TERMINATION_CODES[int(sim.reason[row])],
            )
        )
    return out


def generate(policy, config, N, master_seed, chunk=None):
    """``N`` trajectories under ``policy``; trajectory ``i`` uses stream ``(master_seed, i)``.

    ``chunk`` bounds how many rows are simulated together; the result does not
    depend on it.
    """
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    chunk = chunk or N
    trajectories = []
    for start in range(0, N, chunk):
        ids = range(start, min(N, start + chunk))
        noise = draw_noise(config, master_seed, ids)
        trajectories.extend(_sim_to_trajectories(run_policy(policy, config, noise, master_seed), ids))
    return BatchDataset(trajectories, config, policy_fingerprint(policy), int(master_seed))


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if not np.isfinite(v):
        raise InvalidArgument(f"cannot serialize non-finite value {v}")
    return format(float(v), ".17g")


def _canonical_json(obj):
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_canonical_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_canonical_json(v) for v in obj) + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    return _num(obj)


def dumps(dataset):
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_trajectories": len(dataset),
        "master_seed": dataset.master_seed,
        "policy_fingerprint": dataset.policy_fingerprint,
        "sim_config": dataset.sim_config.to_dict(),
    }
    lines = [_canonical_json(header)]
    for tr in dataset.trajectories:
        cov = ",".join(f"[{_num(x)},{_num(z)}]" for x, z in tr.covariates)
        act = ",".join(str(int(a)) for a in tr.actions)
        lines.append(
            f'{{"id": {int(tr.trajectory_id)}, "termination_reason": "{tr.termination_reason.value}", '
            f'"covariates": [{cov}], "actions": [{act}]}}'
        )
    return "\n".join(lines) + "\n"


def save(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(dataset))


def _parse_line(text, lineno):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed record: {exc.msg}", line=lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("record is not an object", line=lineno)
    return obj


def _parse_trajectory(obj, config, lineno):
    try:
        cov = np.asarray(obj["covariates"], dtype=np.float64)
        act = np.asarray(obj["actions"], dtype=np.int64)
        reason = Termination(obj["termination_reason"])
        tid = int(obj["id"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad trajectory record ({exc})", line=lineno) from None
    if cov.ndim != 2 or cov.shape[1] != 2 or act.ndim != 1 or len(cov) != len(act) + 1:
        raise ValidationError("covariates must have one more (x, z) row than actions", line=lineno)
    if not 1 <= len(act) <= config.max_horizon:
        raise ValidationError(f"trajectory length {len(act)} outside [1, {config.max_horizon}]", line=lineno)
    if not np.all(np.isfinite(cov)) or cov[:, 0].min() < 0 or cov[:, 1].min() < 0:
        raise ValidationError("covariates must be finite and nonnegative", line=lineno)
    if cov[:, 0].max() > config.x_max or cov[:, 1].max() > config.z_max:
        raise ValidationError("covariates exceed the simulator bounds", line=lineno)
    if not np.isin(act, (0, 1)).all():
        raise ValidationError("actions must be 0 or 1", line=lineno)
    return Trajectory(cov, act, tid, reason)


def loads(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty file", line=1)
    header = _parse_line(lines[0], 1)
    if header.get("format") != FORMAT_NAME:
        raise FormatError("not a dataset file (bad format tag)", line=1)
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"dataset format version {header.get('version')} is not supported (expected {FORMAT_VERSION})", line=1
        )
    try:
        config = SimConfig.from_dict(header["sim_config"])
        n = int(header["n_trajectories"])
        seed = int(header["master_seed"])
        fingerprint = str(header["policy_fingerprint"])
    except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
        raise FormatError(f"bad header ({exc})", line=1) from None
    if n == 0 or len(lines) == 1:
        raise ValidationError("dataset has no trajectories", line=1)
    trajectories = [_parse_trajectory(_parse_line(t, i + 2), config, i + 2) for i, t in enumerate(lines[1:])]
    if len(trajectories) != n:
        raise FormatError(f"header announces {n} trajectories but file holds {len(trajectories)} (truncated?)",
                          line=len(lines))
    return BatchDataset(trajectories, config, fingerprint, seed)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


@dataclass
class AuditReport:
    n_trajectories: int
    at_risk: np.ndarray  # trajectories still acting at each timestep index
    treat_frequency: np.ndarray  # empirical P(a_t = 1) at each timestep index
    length_histogram: dict
    termination_counts: dict
    x_range: tuple
    z_range: tuple
    threshold: float
    overlap_warnings: list  # timestep indices where one action is rarer than threshold

    @property
    def ok(self):
        return not self.overlap_warnings

    def to_dict(self):
        return {
            "n_trajectories": self.n_trajectories,
            "at_risk": self.at_risk.tolist(),
            "treat_frequency": [float(f) for f in self.treat_frequency],
            "length_histogram": {str(k): v for k, v in self.length_histogram.items()},
            "termination_counts": self.termination_counts,
            "x_range": list(self.x_range),
            "z_range": list(self.z_range),
            "threshold": self.threshold,
            "overlap_warnings": self.overlap_warnings,
        }

    def to_text(self):
        rows = [f"trajectories: {self.n_trajectories}"]
        rows.append("t  at_risk  P(treat)")
        for t, (n, f) in enumerate(zip(self.at_risk, self.treat_frequency)):
            flag = "  <- overlap warning" if t in self.overlap_warnings else ""
            rows.append(f"{t:<2} {n:>8}  {f:.3f}{flag}")
        rows.append("lengths: " + ", ".join(f"{k}:{v}" for k, v in sorted(self.length_histogram.items())))
        rows.append("termination: " + ", ".join(f"{k}:{v}" for k, v in self.termination_counts.items()))
        rows.append(f"x range: [{self.x_range[0]:.3f}, {self.x_range[1]:.3f}]")
        rows.append(f"z range: [{self.z_range[0]:.3f}, {self.z_range[1]:.3f}]")
        return "\n".join(rows)


def audit(dataset, threshold=0.01):
    """Per-timestep action balance and summary statistics of ``dataset``."""
    cov, act, lengths = dataset.to_arrays()
    H = dataset.sim_config.max_horizon
    acting = lengths[:, None] > np.arange(H)[None, :]
    at_risk = acting.sum(axis=0)
    treated = (act * acting).sum(axis=0)
    freq = np.divide(treated, at_risk, out=np.full(H, np.nan), where=at_risk > 0)
    warnings = [
        int(t) for t in range(H) if at_risk[t] > 0 and min(freq[t], 1.0 - freq[t]) < threshold
    ]
    valid_cov = np.concatenate([tr.covariates for tr in dataset.trajectories])
    hist = {}
    for T in lengths:
        hist[int(T)] = hist.get(int(T), 0) + 1
    reasons = {r.value: 0 for r in Termination}
    for tr in dataset.trajectories:
        reasons[tr.termination_reason.value] += 1
    last = int(np.max(np.flatnonzero(at_risk))) + 1 if at_risk.any() else 0
    return AuditReport(
        len(dataset),
        at_risk[:last],
        freq[:last],
        dict(sorted(hist.items())),
        reasons,
        (float(valid_cov[:, 0].min()), float(valid_cov[:, 0].max())),
        (float(valid_cov[:, 1].min()), float(valid_cov[:, 1].max())),
        threshold,
        warnings,
    )
