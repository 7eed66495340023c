"""Small numpy neural-network core: MLP with manual backprop, diagonal
Gaussian head, running standardisation, Adam and checkpoint files."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .geom import ContractError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


# ------------------------------------------------------------ activations
def _elu(x):
    y = np.minimum(x, 0)
    np.expm1(y, out=y)
    y += np.maximum(x, 0)
    return y


def _elu_grad(x, y):
    # y <= 0 exactly where x <= 0, and there dy/dx = exp(x) = y + 1
    g = np.minimum(y, 0)
    g += 1
    return g


def _tanh(x):
    return np.tanh(x)


def _tanh_grad(x, y):
    return 1.0 - y * y


ACTIVATIONS = {"elu": (_elu, _elu_grad), "tanh": (_tanh, _tanh_grad)}


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Mlp:
    """Fully connected network, activation after every layer but the last.

    Weights are stored ``(in, out)`` so a batch ``x @ W + b`` maps rows.
    """

    def __init__(self, sizes, activation="elu", rng=None, dtype=np.float32, hidden_gain=np.sqrt(2.0), out_gain=0.01):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if k == len(sizes) - 2 else hidden_gain
            self.weights.append(np.ascontiguousarray(orthogonal(rng, i, o, gain), dtype=self.dtype))
            self.biases.append(np.zeros(o, dtype=self.dtype))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x, keep_cache=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.sizes[0]:
            raise ContractError(f"input width {x.shape[-1]} does not match network input {self.sizes[0]}")
        act, _ = ACTIVATIONS[self.activation]
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if k < last:
                h = act(z)
                cache += [z, h]
            else:
                h = z
        return (h, cache) if keep_cache else h

    __call__ = forward

    def backward(self, cache, grad_out):
        """Parameter grads (same order as :attr:`params`) and input grad."""
        _, dact = ACTIVATIONS[self.activation]
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape[-1] != self.sizes[-1]:
            raise ContractError(f"upstream grad width {g.shape[-1]} does not match network output {self.sizes[-1]}")
        grads = [None] * (2 * len(self.weights))
        n = len(self.weights)
        for k in range(n - 1, -1, -1):
            h_in = cache[0] if k == 0 else cache[2 * k]
            h2 = h_in.reshape(-1, h_in.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * k] = h2.T @ g2
            grads[2 * k + 1] = g2.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                z, h = cache[2 * k - 1], cache[2 * k]
                g = g * dact(z, h)
        return grads, g

    def flops(self) -> int:
        return int(sum(2 * i * o for i, o in zip(self.sizes[:-1], self.sizes[1:])))


# --------------------------------------------------------------- Gaussian
class GaussianPolicy:
    """Actor network producing the mean; state-independent log-std."""

    def __init__(self, obs_dim, act_dim, hidden, activation="elu", init_log_std=0.0, rng=None, dtype=np.float32):
        self.net = Mlp([obs_dim, *hidden, act_dim], activation, rng, dtype)
        self.log_std = np.full(act_dim, init_log_std, dtype=self.net.dtype)

    @property
    def params(self):
        return self.net.params + [self.log_std]

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs, keep_cache=False):
        return self.net.forward(obs, keep_cache)

    def sample(self, mean, rng):
        std = np.exp(self.clamped_log_std())
        eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        action = mean + std * eps
        return action, self.log_prob(mean, action)

    def log_prob(self, mean, action):
        """Log-density, accumulated in float64 so that replaying a stored
        action reproduces its stored value to rounding."""
        log_std = self.clamped_log_std().astype(np.float64)
        z = (np.asarray(action, dtype=np.float64) - mean) / np.exp(log_std)
        return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)

    def log_prob_grads(self, mean, action):
        """Partial derivatives of :meth:`log_prob` w.r.t. ``mean`` and ``log_std``."""
        log_std = self.clamped_log_std()
        inv_var = np.exp(-2.0 * log_std)
        d = action - mean
        g_mean = d * inv_var
        inside = (self.log_std >= LOG_STD_MIN) & (self.log_std <= LOG_STD_MAX)
        g_log_std = (d * d * inv_var - 1.0) * inside
        return g_mean, g_log_std

    def entropy(self):
        log_std = self.clamped_log_std()
        return float(np.sum(log_std + 0.5 * np.log(2.0 * np.pi * np.e)))


# ---------------------------------------------------------------- scaler
class RunningScaler:
    """Running mean and population variance (parallel Welford merge).

    Normalised outputs are clipped to ``+-clip`` (``None`` disables it).
    """

    def __init__(self, dim, eps=1e-8, clip=5.0):
        self.dim = dim
        self.eps = eps
        self.clip = clip
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.frozen = False

    def update(self, batch) -> None:
        if self.frozen:
            return
        x = np.asarray(batch, dtype=float).reshape(-1, self.dim)
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot

    def apply(self, x, dtype=None):
        x = np.asarray(x)
        out = (x - self.mean) / np.sqrt(self.var + self.eps)
        if self.clip is not None:
            out = np.clip(out, -self.clip, self.clip)
        return out.astype(dtype or x.dtype, copy=False)

    def inverse(self, y):
        return np.asarray(y) * np.sqrt(self.var + self.eps) + self.mean

    def state(self) -> dict:
        return {"count": np.array(self.count), "mean": self.mean, "var": self.var}

    def load_state(self, d) -> None:
        self.count = float(d["count"])
        self.mean = np.array(d["mean"], dtype=float)
        self.var = np.array(d["var"], dtype=float)


# ------------------------------------------------------------------ Adam
class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        for g in grads:
            g *= s
    return norm


# ------------------------------------------------------------ checkpoint
MAGIC = b"CLCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or corrupt checkpoint file."""


class IncompatibleCheckpoint(CheckpointError):
    """Checkpoint written by an incompatible format version or configuration."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    buf = io.BytesIO()
    np.savez(buf, **tensors)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<II", data[len(MAGIC) : len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    try:
        meta = json.loads(data[start : start + meta_len])
        with np.load(io.BytesIO(data[start + meta_len :])) as z:
            tensors = {k: z[k] for k in z.files}
    except Exception as exc:  # truncated or garbled payload
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, meta
