"""Dense feedforward networks with hand-written reverse-mode gradients."""
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, TrainingError

ACTIVATIONS = ("relu", "tanh", "linear")

CHECKPOINT_MAGIC = b"CDENETS-CKPT-1\n"


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class FeedForwardNet:
    """Fully connected net: hidden layers use ``activation``, the output is linear.

    Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` where ``Wi``
    has shape (fan_in, fan_out), so a batch ``x`` maps as ``x @ W + b``.
    """

    def __init__(self, layer_sizes, activation="relu", rng=None, output_scale=1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = sizes
        self.activation = activation
        rng = np.random.default_rng(rng)
        self.params = []
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1:
                bound *= output_scale
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def weights(self):
        return self.params[0::2]

    @property
    def biases(self):
        return self.params[1::2]

    def n_params(self):
        return sum(p.size for p in self.params)

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input of shape (n, {self.n_in}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        cache = [x]
        a = x
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            z = a @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                a = _act(self.activation, z)
                cache.append((z, a))
            else:
                a = z
        if keep:
            return a, cache
        return a

    def backward(self, cache, grad_out):
        """Return (parameter gradients in ``params`` order, input gradient)."""
        grad_out = np.asarray(grad_out, dtype=float)
        n_layers = len(self.layer_sizes) - 1
        grads = [None] * len(self.params)
        delta = grad_out
        for i in range(n_layers - 1, -1, -1):
            a_prev = cache[0] if i == 0 else cache[i][1]
            if delta.shape != (a_prev.shape[0], self.layer_sizes[i + 1]):
                raise ValueError(f"upstream gradient has shape {delta.shape}")
            grads[2 * i] = a_prev.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
            if i > 0:
                z, a = cache[i]
                delta = delta * _act_grad(self.activation, z, a)
        return grads, delta

    def copy(self):
        other = object.__new__(FeedForwardNet)
        other.layer_sizes = list(self.layer_sizes)
        other.activation = self.activation
        other.params = [p.copy() for p in self.params]
        return other


def checkpoint_bytes(nets, header=None):
    """Serialize nets: magic line, one JSON header line, then float64 LE arrays.

    The header records each net's layer sizes and activation under ``"nets"``;
    parameters follow net by net in ``[W0, b0, W1, b1, ...]`` order, each
    array row-major.
    """
    meta = dict(header or {})
    meta["nets"] = [{"layer_sizes": n.layer_sizes, "activation": n.activation} for n in nets]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
    for net in nets:
        for p in net.params:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def nets_from_bytes(data):
    """Inverse of :func:`checkpoint_bytes`; returns (nets, header)."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError("not a cdenets checkpoint (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise DataError("checkpoint header is not terminated")
    meta = json.loads(rest[:nl].decode("utf-8"))
    payload = memoryview(rest)[nl + 1:]
    nets, offset = [], 0
    for spec in meta["nets"]:
        net = object.__new__(FeedForwardNet)
        net.layer_sizes = [int(s) for s in spec["layer_sizes"]]
        net.activation = spec["activation"]
        net.params = []
        for fan_in, fan_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                nbytes = 8 * int(np.prod(shape))
                chunk = payload[offset:offset + nbytes]
                if len(chunk) != nbytes:
                    raise DataError("truncated checkpoint")
                net.params.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(float))
                offset += nbytes
        nets.append(net)
    if offset != len(payload):
        raise DataError("trailing bytes in checkpoint")
    return nets, meta


@dataclass
class Optimizer:
    """Plain SGD or Adam over a list of parameter arrays."""

    method: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")

    def step(self, params, grads):
        """Update ``params`` in place."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient at optimizer step {self.t + 1}")
        self.t += 1
        if self.method == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return params
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

