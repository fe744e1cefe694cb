"""Experiment configuration: flat ``key = value`` text with dotted section names.

::

    # comments start with '#'
    seed = 0
    budget = 0.25
    sim.noise_std = 0.1
    expert.weights = -0.3, -0.7

Every key has a default (the desk profile below); a file only lists what it
changes.  Values are parsed with the type of the default.
"""

import hashlib

from .errors import FormatError, InvalidArgument

# Desk profile.  Iteration counts are the full-scale values; ``budget`` scales them.
DEFAULTS = {
    "seed": 0,
    "budget": 0.25,
    "output_dir": "cfirl-run",
    "sim.p": 5,
    "sim.noise_std": 0.1,
    "sim.x0_mean": 30.0,
    "sim.x0_std": 5.0,
    "sim.z0_mean": 2.0,
    "sim.z0_std": 1.0,
    "sim.x_max": 50.0,
    "sim.z_max": 15.0,
    "sim.max_horizon": 20,
    "sim.treat_coeff_x": -2.5,
    "sim.treat_coeff_z": 0.5,
    "sim.drift_x": None,  # auto: +0.5 * p
    "sim.drift_z": None,  # auto: -p
    "expert.gamma": 0.99,
    "expert.weights": (-0.3, -0.7),
    "expert.kappa": 5.0,
    "expert.hidden_dim": 32,
    "expert.batch_size": 256,
    "expert.learning_rate": 1e-3,
    "expert.target_sync": 200,
    "expert.replay_capacity": 10000,
    "expert.eps_max": 0.9,
    "expert.eps_min": 0.0,
    "expert.eps_decay": 5e-5,
    "expert.iterations": 40000,
    "dataset.n": 2000,
    "dataset.seed": -1,  # -1: derive from the master seed
    "cf.mode": "iptw",
    "cf.hidden_dim": 32,
    "cf.batch_size": 128,
    "cf.learning_rate": 1e-3,
    "cf.iterations": 16000,
    "cf.propensity_iterations": 4000,
    "cf.overlap_threshold": 0.01,
    "cf.force": False,
    "cirl.epsilon": 0.001,
    "cirl.max_iters": 15,
    "cirl.hidden_dim": 32,
    "cirl.batch_size": 256,
    "cirl.learning_rate": 1e-3,
    "cirl.target_sync": 100,
    "cirl.eps_max": 0.9,
    "cirl.eps_min": 0.0,
    "cirl.eps_decay": 1e-5,
    "cirl.iterations": 20000,
    "cirl.mu_loss": "squared",
    "eval.rollouts": 1000,
    "eval.n_test": 1000,
    "pipeline.modes": ("iptw", "plain-x"),
}


def _parse_value(key, text, default, line=None):
    text = text.strip()
    try:
        if default is None:
            return None if text.lower() in ("", "auto", "none") else float(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
        return text
    except ValueError:
        raise FormatError(f"bad value for {key}: {text!r}", line=line) from None


def format_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    return str(v)


class ExperimentConfig:
    """Mapping of dotted keys to typed values, always complete."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value, line=None):
        if key not in DEFAULTS:
            msg = f"unknown config key {key!r}"
            if line is not None:
                raise FormatError(msg, line=line)
            raise InvalidArgument(msg)
        if isinstance(value, str):
            value = _parse_value(key, value, DEFAULTS[key], line)
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.values.items())

    def digest(self, keys=None):
        """Hash of the given keys (all by default), for caching and manifests."""
        keys = keys or list(self.values)
        text = "".join(f"{k}={format_value(self.values[k])}\n" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def parse(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise FormatError("empty key", line=lineno)
            cfg.set(key, value, line=lineno)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise InvalidArgument(f"cannot read config {path}: {e.strerror}") from None
        return cls.parse(text)
