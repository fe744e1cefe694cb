"""Autoregressive tumour-volume / side-effect simulator under a binary treatment.

Dynamics of order ``p`` over the last ``p`` covariates and actions (the action
being taken now is the newest entry of the action window)::

    x' = mean(x_buf) + treat_coeff_x * sum(a_buf) + drift_x + eps
    z' = mean(z_buf) + treat_coeff_z * sum(a_buf) + drift_z + eta

Both are clamped to ``[0, max]``.  A trajectory ends once ``x' <= 0``,
``x' >= x_max``, ``z' >= z_max`` or ``max_horizon`` actions have been taken.

The scalar functions (``reset``/``step``/``true_reward``) and the vectorized
:class:`BatchSimulator` share :func:`advance`, so they cannot drift apart.
"""

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidState
from .rng import derive_rng


class Termination(str, enum.Enum):
    TUMOR_CLEARED = "tumor_cleared"
    TUMOR_MAX = "tumor_max"
    SIDE_EFFECT_MAX = "side_effect_max"
    HORIZON = "horizon"


TERMINATION_CODES = list(Termination)


@dataclass(frozen=True)
class SimConfig:
    p: int = 5
    noise_std: float = 0.1
    x0_mean: float = 30.0
    x0_std: float = 5.0
    z0_mean: float = 2.0
    z0_std: float = 1.0
    x_max: float = 50.0
    z_max: float = 15.0
    max_horizon: int = 20
    treat_coeff_x: float = -2.5
    treat_coeff_z: float = 0.5
    # None resolves to the order-dependent defaults +0.5p and -p.
    drift_x: float = None
    drift_z: float = None

    def __post_init__(self):
        if self.p < 1:
            raise InvalidArgument("autoregressive order p must be >= 1")
        if self.max_horizon < 1:
            raise InvalidArgument("max_horizon must be >= 1")
        if self.noise_std < 0:
            raise InvalidArgument("noise_std must be nonnegative")
        if self.x_max <= 0 or self.z_max <= 0:
            raise InvalidArgument("x_max and z_max must be positive")
        if self.drift_x is None:
            object.__setattr__(self, "drift_x", 0.5 * self.p)
        if self.drift_z is None:
            object.__setattr__(self, "drift_z", -float(self.p))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgument(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EnvState:
    x_buffer: tuple
    z_buffer: tuple
    a_buffer: tuple
    t: int = 0
    terminated: bool = False
    termination_reason: Termination = None


@dataclass(frozen=True)
class RewardWeights:
    """Linear reward weights; normalized on construction so that ``||w||_1 <= 1``."""

    w: tuple
    gamma: float = 0.99

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("reward weights must be finite")
        norm = np.abs(w).sum()
        if norm > 1.0:
            w = w / norm
        object.__setattr__(self, "w", tuple(float(v) for v in w))
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {self.gamma}")

    @classmethod
    def l1_normalized(cls, w, gamma=0.99):
        w = np.asarray(w, dtype=np.float64)
        norm = np.abs(w).sum()
        return cls(tuple(w / norm) if norm > 0 else tuple(w), gamma)

    @property
    def vector(self):
        return np.asarray(self.w)


def advance(config, x_buf, z_buf, a_buf, eps, eta):
    """Next (x, z) from windows whose last action entry is the current action.

    Works elementwise over leading batch axes; buffers are ``(..., p)``.
    Returns ``(x_raw, z_raw, x, z)`` where the last two are clamped.
    """
    s = np.sum(a_buf, axis=-1)
    x_raw = np.mean(x_buf, axis=-1) + config.treat_coeff_x * s + config.drift_x + eps
    z_raw = np.mean(z_buf, axis=-1) + config.treat_coeff_z * s + config.drift_z + eta
    return x_raw, z_raw, np.clip(x_raw, 0.0, config.x_max), np.clip(z_raw, 0.0, config.z_max)


def termination_code(config, x, z, t_next):
    """Index into TERMINATION_CODES, or -1 while the trajectory continues."""
    x = np.asarray(x)
    code = np.full(x.shape, -1, dtype=np.int64)
    code = np.where(t_next >= config.max_horizon, 3, code)
    code = np.where(np.asarray(z) >= config.z_max, 2, code)
    code = np.where(x >= config.x_max, 1, code)
    code = np.where(x <= 0.0, 0, code)
    return code


def normalized_features(config, x, z):
    """Covariates scaled to [0, 1] by their ranges (minima are 0)."""
    return np.stack([np.asarray(x) / config.x_max, np.asarray(z) / config.z_max], axis=-1)


def _initial_covariates(config, rng):
    x0 = rng.normal(config.x0_mean, config.x0_std)
    z0 = rng.normal(config.z0_mean, config.z0_std)
    # x0 is kept strictly inside (0, x_max): a start on the boundary would be terminal.
    x0 = float(np.clip(x0, np.nextafter(0.0, 1.0), np.nextafter(config.x_max, 0.0)))
    z0 = float(np.clip(z0, 0.0, np.nextafter(config.z_max, 0.0)))
    return x0, z0


def reset(config, seed):
    rng = derive_rng(seed, "oncosim.reset")
    x0, z0 = _initial_covariates(config, rng)
    p = config.p
    return EnvState((x0,) * p, (z0,) * p, (0,) * p)


def step(config, state, action, rng):
    """Advance one timestep; returns ``(next_state, next_x, next_z)``."""
    if state.terminated:
        raise InvalidState("step called on a terminated trajectory")
    if action not in (0, 1):
        raise InvalidArgument(f"action must be 0 or 1, got {action}")
    a_buf = state.a_buffer[1:] + (int(action),)
    eps, eta = (rng.normal(0.0, config.noise_std, size=2) if config.noise_std > 0 else (0.0, 0.0))
    _, _, x, z = advance(config, np.array(state.x_buffer), np.array(state.z_buffer), np.array(a_buf), eps, eta)
    x, z = float(x), float(z)
    t = state.t + 1
    code = int(termination_code(config, x, z, t))
    nxt = EnvState(
        state.x_buffer[1:] + (x,),
        state.z_buffer[1:] + (z,),
        a_buf,
        t,
        code >= 0,
        TERMINATION_CODES[code] if code >= 0 else None,
    )
    return nxt, x, z


def reward_from_covariates(config, weights, x_next, z_next):
    w = weights.vector if isinstance(weights, RewardWeights) else np.asarray(weights)
    return normalized_features(config, x_next, z_next) @ w


def true_reward(config, state, action, weights, rng):
    _, x, z = step(config, state, action, rng)
    return float(reward_from_covariates(config, weights, x, z))


@dataclass
class TrajectoryNoise:
    """Every random draw one trajectory needs, taken up front from its own stream."""

    x0: np.ndarray
    z0: np.ndarray
    eps: np.ndarray  # (n, max_horizon)
    eta: np.ndarray
    uniforms: np.ndarray  # (n, max_horizon), for sampling stochastic actions


def draw_noise(config, master_seed, indices, stream="trajectory"):
    n = len(indices)
    H = config.max_horizon
    noise = TrajectoryNoise(np.empty(n), np.empty(n), np.zeros((n, H)), np.zeros((n, H)), np.empty((n, H)))
    for row, i in enumerate(indices):
        rng = derive_rng(master_seed, stream, int(i))
        noise.x0[row], noise.z0[row] = _initial_covariates(config, rng)
        if config.noise_std > 0:
            noise.eps[row] = rng.normal(0.0, config.noise_std, size=H)
            noise.eta[row] = rng.normal(0.0, config.noise_std, size=H)
        noise.uniforms[row] = rng.random(H)
    return noise


class BatchSimulator:
    """Steps many independent trajectories in lockstep.

    ``covariates[i, t]`` holds (x_t, z_t); ``actions[i, t]`` the action at t.
    Finished rows are ignored by ``step``.
    """

    def __init__(self, config, noise):
        self.config = config
        self.noise = noise
        n = len(noise.x0)
        p, H = config.p, config.max_horizon
        self.n = n
        self.t = 0
        self.x_buf = np.repeat(noise.x0[:, None], p, axis=1)
        self.z_buf = np.repeat(noise.z0[:, None], p, axis=1)
        self.a_buf = np.zeros((n, p))
        self.covariates = np.zeros((n, H + 1, 2))
        self.covariates[:, 0, 0] = noise.x0
        self.covariates[:, 0, 1] = noise.z0
        self.actions = np.zeros((n, H), dtype=np.int8)
        self.lengths = np.zeros(n, dtype=np.int64)
        self.alive = np.ones(n, dtype=bool)
        self.reason = np.full(n, -1, dtype=np.int64)

    def step(self, actions):
        """Apply ``actions`` (n,) to live rows; returns the clamped next (x, z)."""
        cfg, t = self.config, self.t
        if not self.alive.any():
            raise InvalidState("all trajectories have terminated")
        actions = np.asarray(actions).astype(np.int64)
        a_buf = np.concatenate([self.a_buf[:, 1:], actions[:, None]], axis=1)
        _, _, x, z = advance(cfg, self.x_buf, self.z_buf, a_buf, self.noise.eps[:, t], self.noise.eta[:, t])
        live = self.alive
        self.a_buf[live] = a_buf[live]
        self.x_buf[live] = np.concatenate([self.x_buf[live, 1:], x[live, None]], axis=1)
        self.z_buf[live] = np.concatenate([self.z_buf[live, 1:], z[live, None]], axis=1)
        self.actions[live, t] = actions[live]
        self.covariates[live, t + 1, 0] = x[live]
        self.covariates[live, t + 1, 1] = z[live]
        self.lengths[live] = t + 1
        code = termination_code(cfg, x, z, t + 1)
        ended = live & (code >= 0)
        self.reason[ended] = code[ended]
        self.alive = live & (code < 0)
        self.t += 1
        return x, z

    @property
    def done(self):
        return not self.alive.any()
