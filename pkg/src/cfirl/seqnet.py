"""Single-layer GRU with a linear output head, trained by hand-written BPTT.

Every learned function in the package (Q-networks, feature-expectation
networks, dynamics and propensity models) is one of these.  Cell equations,
for input ``x`` and previous hidden state ``h``::

    r  = sigmoid(x W_x[:, :H]    + h W_h[:, :H] + b[:H])
    u  = sigmoid(x W_x[:, H:2H]  + h W_h[:, H:] + b[H:2H])
    n  = tanh(x W_x[:, 2H:] + (r * h) W_hn + b[2H:])
    h' = (1 - u) * n + u * h
    y  = h' W_out + b_out

All arrays are float64.
"""

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from ._kernels import gru_backward_loop
from .errors import FormatError, InvalidArgument, NumericFailure, VersionMismatch
from .rng import derive_rng

# Serialization field order; also the canonical iteration order everywhere.
PARAM_ORDER = ("W_x", "W_h", "W_hn", "b", "W_out", "b_out")

_MAGIC = b"SEQN"
_FORMAT_VERSION = 1


@dataclass(eq=False)
class NetworkParams:
    input_dim: int
    hidden_dim: int
    output_dim: int
    arrays: dict = field(repr=False)
    # Bumped on every in-place update so stale forward caches are detectable.
    version: int = field(default=0, compare=False)

    def shapes(self):
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        return {
            "W_x": (i, 3 * h),
            "W_h": (h, 2 * h),
            "W_hn": (h, h),
            "b": (3 * h,),
            "W_out": (h, o),
            "b_out": (o,),
        }

    def validate(self):
        for name, shape in self.shapes().items():
            arr = self.arrays.get(name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise InvalidArgument(f"parameter {name} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericFailure(f"parameter {name} has non-finite entries", parameter=name)

    def equals(self, other):
        return (
            (self.input_dim, self.hidden_dim, self.output_dim)
            == (other.input_dim, other.hidden_dim, other.output_dim)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_ORDER)
        )

    def num_parameters(self):
        return sum(a.size for a in self.arrays.values())


@dataclass
class ForwardCache:
    params: NetworkParams
    version: int
    x: np.ndarray
    h0: np.ndarray
    hs: np.ndarray
    r: np.ndarray
    u: np.ndarray
    n: np.ndarray
    counts: np.ndarray
    order: np.ndarray
    squeeze: bool


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)
    step_count: int = 0

    @classmethod
    def for_params(cls, params, learning_rate=1e-3):
        zeros = {k: np.zeros_like(params.arrays[k]) for k in PARAM_ORDER}
        return cls(
            learning_rate=learning_rate,
            m=zeros,
            v={k: np.zeros_like(a) for k, a in zeros.items()},
        )


def init_network(seed, input_dim, hidden_dim, output_dim):
    """Weights ~ U(-1/sqrt(H), 1/sqrt(H)), biases zero; a pure function of ``seed``."""
    for name, dim in (("input_dim", input_dim), ("hidden_dim", hidden_dim), ("output_dim", output_dim)):
        if int(dim) < 1:
            raise InvalidArgument(f"{name} must be >= 1, got {dim}")
    input_dim, hidden_dim, output_dim = int(input_dim), int(hidden_dim), int(output_dim)
    rng = derive_rng(seed, "seqnet.init")
    scale = 1.0 / np.sqrt(hidden_dim)
    params = NetworkParams(input_dim, hidden_dim, output_dim, arrays={})
    for name, shape in params.shapes().items():
        if name.startswith("b"):
            params.arrays[name] = np.zeros(shape)
        else:
            params.arrays[name] = rng.uniform(-scale, scale, size=shape)
    return params


def copy_params(src):
    dst = copy.deepcopy(src)
    dst.version = 0
    return dst


def _sigmoid(a):
    # tanh form: overflow-free and a single ufunc pass.
    out = np.multiply(a, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def _as_batch(params, sequence):
    x = np.asarray(sequence, dtype=np.float64)
    squeeze = False
    if x.ndim == 2:
        x = x[None]
        squeeze = True
    if x.ndim != 3 or x.shape[2] != params.input_dim:
        raise InvalidArgument(
            f"expected inputs of shape (T, {params.input_dim}) or (B, T, {params.input_dim}), got {x.shape}"
        )
    if x.shape[1] == 0:
        raise InvalidArgument("sequence must be nonempty")
    return x, squeeze


def forward(params, sequence, h0=None, lengths=None):
    """Run the network over ``sequence`` (``(T, I)`` or ``(B, T, I)``).

    ``lengths`` (per batch row) skips the work past each row's end; outputs
    there are zero.  Returns ``(outputs, cache)``.
    """
    x, squeeze = _as_batch(params, sequence)
    B, T, _ = x.shape
    H = params.hidden_dim
    if lengths is None:
        order = np.arange(B)
        counts = np.full(T, B)
    else:
        lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
        if lengths.shape[0] != B or lengths.min(initial=1) < 1 or lengths.max(initial=1) > T:
            raise InvalidArgument("lengths must give a value in [1, T] per batch row")
        order = np.argsort(-lengths, kind="stable")
        x = x[order]
        counts = (lengths[:, None] > np.arange(T)[None, :]).sum(axis=0)
    if h0 is None:
        h0 = np.zeros((B, H))
    else:
        h0 = np.asarray(h0, dtype=np.float64).reshape(B, H)[order]

    a = params.arrays
    gx = x.reshape(B * T, -1) @ a["W_x"]
    gx = gx.reshape(B, T, 3 * H)
    gx += a["b"]
    W_h, W_hn = a["W_h"], a["W_hn"]
    hs = np.empty((B, T, H))
    r_all = np.zeros((B, T, H))
    u_all = np.zeros((B, T, H))
    n_all = np.zeros((B, T, H))
    h = h0
    for t in range(T):
        k = counts[t]
        hk = h[:k]
        g = gx[:k, t]
        ru = hk @ W_h
        ru += g[:, : 2 * H]
        ru = _sigmoid(ru)
        r, u = ru[:, :H], ru[:, H:]
        n = (r * hk) @ W_hn
        n += g[:, 2 * H :]
        np.tanh(n, out=n)
        h_new = h.copy() if k < B else np.empty_like(h)
        # h' = n + u * (h - n)
        hn = hk - n
        hn *= u
        hn += n
        h_new[:k] = hn
        r_all[:k, t], u_all[:k, t], n_all[:k, t] = r, u, n
        hs[:, t] = h_new
        h = h_new

    out = hs.reshape(B * T, H) @ a["W_out"] + a["b_out"]
    out = out.reshape(B, T, -1)
    if lengths is not None:
        mask = counts[None, :] > np.arange(B)[:, None]
        out *= mask[..., None]
        inverse = np.empty_like(order)
        inverse[order] = np.arange(B)
        out = out[inverse]
    cache = ForwardCache(params, params.version, x, h0, hs, r_all, u_all, n_all, counts, order, squeeze)
    return (out[0] if squeeze else out), cache


def hidden_states(cache):
    """Hidden state after each step, in the caller's row order, shape (B, T, H)."""
    inverse = np.empty_like(cache.order)
    inverse[cache.order] = np.arange(len(cache.order))
    hs = cache.hs[inverse]
    return hs[0] if cache.squeeze else hs


def step(params, x_t, h):
    """One cell step from hidden ``h`` (inference only); returns the new hidden state."""
    a = params.arrays
    H = params.hidden_dim
    x_t = np.asarray(x_t, dtype=np.float64)
    g = x_t @ a["W_x"] + a["b"]
    ru = _sigmoid(g[..., : 2 * H] + h @ a["W_h"])
    r, u = ru[..., :H], ru[..., H:]
    n = np.tanh(g[..., 2 * H :] + (r * h) @ a["W_hn"])
    return n + u * (h - n)


def head(params, h):
    return h @ params.arrays["W_out"] + params.arrays["b_out"]


def backward(params, cache, output_gradients):
    """Exact gradients of ``sum(output_gradients * outputs)`` w.r.t. every parameter."""
    if cache.params is not params or cache.version != params.version:
        raise InvalidArgument("forward cache does not belong to these parameters (stale or mismatched)")
    dy = np.asarray(output_gradients, dtype=np.float64)
    if cache.squeeze:
        dy = dy[None]
    B, T, H = cache.hs.shape
    if dy.shape != (B, T, params.output_dim):
        raise InvalidArgument(f"output gradients have shape {dy.shape}, expected {(B, T, params.output_dim)}")
    counts = cache.counts
    dy = dy[cache.order]
    if counts[-1] < B or counts[0] < B:
        mask = counts[None, :] > np.arange(B)[:, None]
        dy = dy * mask[..., None]

    a = params.arrays
    grads = {
        "W_out": cache.hs.reshape(B * T, H).T @ dy.reshape(B * T, -1),
        "b_out": dy.sum(axis=(0, 1)),
    }
    dhs = np.ascontiguousarray(dy @ a["W_out"].T)
    dgx, grads["W_h"], grads["W_hn"] = gru_backward_loop(
        dhs, cache.h0, cache.hs, cache.r, cache.u, cache.n, a["W_h"], a["W_hn"], counts.astype(np.int64)
    )
    grads["W_x"] = cache.x.reshape(B * T, -1).T @ dgx.reshape(B * T, -1)
    grads["b"] = dgx.sum(axis=(0, 1))
    return grads


def optimizer_step(params, grads, state):
    """Adam update, applied in place; returns ``(params, state)`` for chaining."""
    for name in PARAM_ORDER:
        g = grads[name]
        if g.shape != params.arrays[name].shape:
            raise InvalidArgument(f"gradient {name} has shape {g.shape}, expected {params.arrays[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {name}", parameter=name)
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    for name in PARAM_ORDER:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def to_bytes(params):
    """Layout: b"SEQN", u32 version, u32 input/hidden/output dims, then each
    array of PARAM_ORDER as little-endian float64 in C order."""
    parts = [_MAGIC, struct.pack("<4I", _FORMAT_VERSION, params.input_dim, params.hidden_dim, params.output_dim)]
    for name in PARAM_ORDER:
        parts.append(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob):
    if len(blob) < 20 or blob[:4] != _MAGIC:
        raise FormatError("not a network parameter file")
    version, i, h, o = struct.unpack("<4I", blob[4:20])
    if version != _FORMAT_VERSION:
        raise VersionMismatch(f"unsupported network file version {version}")
    params = NetworkParams(i, h, o, arrays={})
    offset = 20
    for name, shape in params.shapes().items():
        size = int(np.prod(shape)) * 8
        chunk = blob[offset : offset + size]
        if len(chunk) != size:
            raise FormatError(f"network file truncated in {name}")
        params.arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise FormatError("trailing bytes after network parameters")
    params.validate()
    return params


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load_params(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
