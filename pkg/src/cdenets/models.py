"""Estimator heads and the shared training loop.

Every loss function here takes raw network outputs and returns
``(mean loss, gradient w.r.t. the outputs)``; :class:`CdeModel` chains that
gradient through the network(s).
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, ndtr

from . import _kernels
from . import partition as part
from . import trendfilter as tf
from .data import DiscretizationGrid, atomic_write
from .errors import ConfigError, TrainingError
from .nn import FeedForwardNet, Optimizer, checkpoint_bytes, nets_from_bytes

MODEL_TAGS = ("multiscale", "trendfilter", "multinomial", "mdn", "point")
DENSITY_TAGS = ("multiscale", "trendfilter", "multinomial", "mdn")

CHOL_FLOOR = 1e-4
MDN_SUBCELLS = 32
MASS_FLOOR = 1e-300


@dataclass
class TrainConfig:
    model: str = "trendfilter"
    lam: float = 0.0
    k: int = 0
    components: int = 3
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden: tuple = (64, 64)
    activation: str = "relu"
    seed: int = 0
    per_node: bool = False
    smooth_penalty: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.model not in MODEL_TAGS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODEL_TAGS}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError("lambda must be a finite value >= 0")
        if int(self.k) != self.k or self.k < 0:
            raise ConfigError("penalty order k must be a non-negative integer")
        if int(self.components) != self.components or self.components < 1:
            raise ConfigError("mixture component count must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        self.k = int(self.k)
        self.components = int(self.components)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes):
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# losses on raw outputs
# ---------------------------------------------------------------------------

def softmax_log_probs(logits):
    return logits - logsumexp(logits, axis=1, keepdims=True)


def multinomial_loss(logits, labels):
    """Mean categorical NLL under softmax."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = softmax_log_probs(logits)
    rows = np.arange(n)
    per_example = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return per_example.mean(), grad / n


def cde_tf_loss(delta, lam, logits, labels, smooth=False):
    """Mean over the batch of softmax NLL plus ``lam * ||delta @ psi_i||_1``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[1] != delta.n_bins:
        raise ValueError(f"{logits.shape[1]} logits but penalty operator covers {delta.n_bins} bins")
    n = logits.shape[0]
    logp = softmax_log_probs(logits)
    rows = np.arange(n)
    if smooth:
        pen = tf.smooth_penalty_value(delta, logits)
        pen_grad = tf.smooth_penalty_gradient(delta, logits)
    else:
        pen = tf.penalty_value(delta, logits)
        pen_grad = tf.penalty_subgradient(delta, logits)
    per_example = -logp[rows, labels] + lam * pen
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad = grad + lam * pen_grad
    return per_example.mean(), grad / n


def multiscale_loss(tree, logits, labels):
    """Mean over examples of the BCE summed along each observed root-to-leaf path."""
    losses, grad = part.path_cross_entropy(tree, logits, labels)
    n = losses.shape[0]
    return losses.mean(), grad / n


def multiscale_density(tree, logits):
    """Leaf probabilities from per-node logits via the logistic split map."""
    return np.exp(part.leaf_log_probs(tree, np.atleast_2d(logits)))


def point_estimate_loss(outputs, targets):
    outputs = np.asarray(outputs, dtype=float)
    diff = outputs - np.asarray(targets, dtype=float).reshape(outputs.shape)
    return np.mean(diff * diff), 2.0 * diff / diff.size


# --- mixture density network -------------------------------------------------

@dataclass
class GmmParams:
    """Batch of Gaussian mixtures: weights (n, M), means (n, M, d), chols (n, M, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray
    log_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.log_weights is None:
            with np.errstate(divide="ignore"):
                self.log_weights = np.log(self.weights)

    @property
    def n_components(self):
        return self.weights.shape[1]

    @property
    def dim(self):
        return self.means.shape[2]

    def covariances(self):
        return self.chols @ np.swapaxes(self.chols, -1, -2)

    def mean(self):
        return np.einsum("nm,nmd->nd", self.weights, self.means)


def mdn_output_dim(components, dim):
    return components * (1 + dim + dim * (dim + 1) // 2)


def _tril(dim):
    rows, cols = np.tril_indices(dim)
    return rows, cols


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mdn_unpack(outputs, components, dim):
    """Map raw outputs to GmmParams.

    Layout per row: M weight logits, M*d means, then M lower-triangular
    Cholesky blocks in row-major (i >= j) order; diagonal entries go through
    ``softplus(.) + CHOL_FLOOR``.
    """
    outputs = np.asarray(outputs, dtype=float)
    n = outputs.shape[0]
    m, d = components, dim
    if outputs.shape[1] != mdn_output_dim(m, d):
        raise ValueError(f"MDN expects {mdn_output_dim(m, d)} outputs, got {outputs.shape[1]}")
    logits = outputs[:, :m]
    means = outputs[:, m:m + m * d].reshape(n, m, d)
    raw = outputs[:, m + m * d:].reshape(n, m, d * (d + 1) // 2)
    rows, cols = _tril(d)
    chols = np.zeros((n, m, d, d))
    vals = raw.copy()
    diag = rows == cols
    vals[..., diag] = _softplus(raw[..., diag]) + CHOL_FLOOR
    chols[..., rows, cols] = vals
    log_w = softmax_log_probs(logits)
    return GmmParams(np.exp(log_w), means, chols, log_w)


def _component_log_pdf(params, y):
    """log N(y_n; mu_nm, L L^T) for every (n, m), plus z = L^-1 (y - mu)."""
    resid = y[:, None, :] - params.means
    z = np.linalg.solve(params.chols, resid[..., None])[..., 0]
    d = params.dim
    log_diag = np.log(np.diagonal(params.chols, axis1=-2, axis2=-1)).sum(axis=-1)
    return -0.5 * d * math.log(2.0 * math.pi) - log_diag - 0.5 * np.sum(z * z, axis=-1), z


def mdn_log_likelihood(params, targets):
    """Per-example continuous log density of ``targets`` (n, d) under the mixture."""
    y = np.asarray(targets, dtype=float).reshape(-1, params.dim)
    comp, _ = _component_log_pdf(params, y)
    return logsumexp(params.log_weights + comp, axis=1)


def mdn_loss(outputs, targets, components):
    """Mean negative log-likelihood of a full-covariance Gaussian mixture."""
    y = np.asarray(targets, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    n, d = y.shape
    m = components
    params = mdn_unpack(outputs, m, d)
    comp, z = _component_log_pdf(params, y)
    joint = params.log_weights + comp
    ll = logsumexp(joint, axis=1)
    if not np.all(np.isfinite(ll)):
        raise TrainingError("non-finite mixture likelihood")
    resp = np.exp(joint - ll[:, None])

    # d(-ll)/d(weight logits) = w - resp
    g_logits = params.weights - resp
    # u = L^-T z;  d logN/d mu = u;  d logN/d L = tril(u z^T) - diag(1/L_ii)
    u = np.linalg.solve(np.swapaxes(params.chols, -1, -2), z[..., None])[..., 0]
    g_means = -resp[..., None] * u
    g_chol = u[..., :, None] * z[..., None, :]
    diag_vals = np.diagonal(params.chols, axis1=-2, axis2=-1)
    g_chol[..., np.arange(d), np.arange(d)] -= 1.0 / diag_vals
    g_chol = -resp[..., None, None] * g_chol
    rows, cols = _tril(d)
    g_raw = g_chol[..., rows, cols]
    raw_start = m + m * d
    raw = np.asarray(outputs, dtype=float)[:, raw_start:].reshape(n, m, -1)
    diag = rows == cols
    g_raw[..., diag] *= _sigmoid(raw[..., diag])

    grad = np.concatenate([g_logits, g_means.reshape(n, -1), g_raw.reshape(n, -1)], axis=1)
    return -ll.mean(), grad / n


def mdn_discrete_density(params, grid):
    """Mixture mass of every grid bin, renormalized over the grid; shape (n, n_bins)."""
    if params.dim != grid.ndim:
        raise ValueError("mixture and grid dimensions differ")
    n = params.weights.shape[0]
    if grid.ndim == 1:
        edges = grid.edges(0)
        sd = params.chols[..., 0, 0]
        cdf = ndtr((edges[None, None, :] - params.means[..., 0][..., None]) / sd[..., None])
        mass = np.einsum("nm,nmb->nb", params.weights, np.diff(cdf, axis=-1))
    elif grid.ndim == 2:
        ex, ey = grid.edges(0), grid.edges(1)
        mass = np.empty((n, grid.n_bins))
        for i in range(n):
            rect = _kernels.gmm_rect_probs_2d(
                np.ascontiguousarray(params.means[i]), np.ascontiguousarray(params.chols[i]),
                ex, ey, MDN_SUBCELLS)
            mass[i] = np.tensordot(params.weights[i], rect, axes=1).ravel()
    else:
        raise ValueError("discretized mixtures support 1 or 2 target dimensions")
    mass = np.maximum(mass, 0.0)
    total = mass.sum(axis=1, keepdims=True)
    uniform = np.full_like(mass, 1.0 / grid.n_bins)
    return np.where(total > MASS_FLOOR, mass / np.maximum(total, MASS_FLOOR), uniform)


def density_point_prediction(probs, grid):
    """Expected bin centre under each density row; returns (n, d)."""
    probs = np.atleast_2d(probs)
    return probs @ grid.flat_centers()


# ---------------------------------------------------------------------------
# model wrapper
# ---------------------------------------------------------------------------

class CdeModel:
    """A network (or bundle of per-node networks) plus one estimator head."""

    def __init__(self, config, grid, n_features):
        self.config = config
        self.grid = grid
        self.n_features = int(n_features)
        self.tree = None
        self.delta = None
        tag = config.model
        if tag == "multiscale":
            self.tree = part.build_tree(grid.bins)
            n_out = self.tree.n_nodes
        elif tag in ("trendfilter", "multinomial"):
            n_out = grid.n_bins
            if tag == "trendfilter":
                self.delta = tf.lattice_penalty(grid.bins, config.k)
        elif tag == "mdn":
            n_out = mdn_output_dim(config.components, grid.ndim)
        else:
            n_out = grid.ndim
        self.n_outputs = n_out
        rng = np.random.default_rng(config.seed)
        sizes_of = lambda out: [self.n_features, *config.hidden, out]  # noqa: E731
        if tag == "multiscale" and config.per_node:
            self.nets = [FeedForwardNet(sizes_of(1), config.activation, rng, output_scale=0.1)
                         for _ in range(n_out)]
        else:
            self.nets = [FeedForwardNet(sizes_of(n_out), config.activation, rng, output_scale=0.1)]
        self._init_head_bias()

    # target scaling for the continuous heads
    @property
    def _lows(self):
        return np.asarray(self.grid.lows)

    @property
    def _ranges(self):
        return np.asarray(self.grid.highs) - np.asarray(self.grid.lows)

    def _scale(self, y):
        return (np.asarray(y, dtype=float).reshape(-1, self.grid.ndim) - self._lows) / self._ranges

    def _init_head_bias(self):
        bias = self.nets[-1].params[-1]
        m, d = self.config.components, self.grid.ndim
        if self.config.model == "mdn":
            # component means spread over the unit box, moderate widths
            bias[m:m + m * d] = np.repeat((np.arange(m) + 0.5) / m, d)
            rows, cols = _tril(d)
            raw = bias[m + m * d:].reshape(m, -1)
            raw[:, rows == cols] = math.log(math.expm1(0.1))
        elif self.config.model == "point":
            bias[:] = 0.5

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    def outputs(self, x, keep=False):
        x = np.asarray(x, dtype=float)
        if len(self.nets) == 1:
            return self.nets[0].forward(x, keep=keep)
        results = [net.forward(x, keep=keep) for net in self.nets]
        if keep:
            return np.hstack([r[0] for r in results]), [r[1] for r in results]
        return np.hstack(results)

    def _backward(self, caches, grad_out):
        if len(self.nets) == 1:
            grads, _ = self.nets[0].backward(caches, grad_out)
            return grads
        grads = []
        for j, (net, cache) in enumerate(zip(self.nets, caches)):
            g, _ = net.backward(cache, grad_out[:, j:j + 1])
            grads.extend(g)
        return grads

    def loss_from_outputs(self, out, labels=None, targets=None):
        """Head loss and its output gradient; ``targets`` are in target units."""
        c = self.config
        if c.model == "multiscale":
            return multiscale_loss(self.tree, out, labels)
        if c.model == "trendfilter":
            return cde_tf_loss(self.delta, c.lam, out, labels, smooth=c.smooth_penalty)
        if c.model == "multinomial":
            return multinomial_loss(out, labels)
        if c.model == "mdn":
            return mdn_loss(out, self._scale(targets), c.components)
        return point_estimate_loss(out, self._scale(targets))

    def loss_and_grads(self, x, labels=None, targets=None):
        out, caches = self.outputs(x, keep=True)
        loss, g_out = self.loss_from_outputs(out, labels, targets)
        return loss, self._backward(caches, g_out)

    def fit(self, x, targets, labels=None, callback=None):
        """Minibatch training; returns the mean training loss of every epoch."""
        from .data import discretize

        c = self.config
        x = np.asarray(x, dtype=float)
        y = np.asarray(targets, dtype=float).reshape(len(x), -1)
        if labels is None:
            labels = discretize(y, self.grid)
        rng = np.random.default_rng([c.seed, 1])
        opt = Optimizer(c.optimizer, c.lr)
        params = self.params
        n = len(x)
        history = []
        for epoch in range(c.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, c.batch_size):
                idx = order[start:start + c.batch_size]
                loss, grads = self.loss_and_grads(x[idx], labels[idx], y[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"{c.model}: non-finite loss in epoch {epoch + 1}")
                opt.step(params, grads)
                total += loss * len(idx)
            history.append(total / n)
            if callback is not None:
                callback(epoch, history[-1])
        return history

    # prediction --------------------------------------------------------

    def gmm(self, x):
        """Mixture parameters in target units (MDN only)."""
        p = mdn_unpack(self.outputs(x), self.config.components, self.grid.ndim)
        scale = self._ranges
        p.means = p.means * scale + self._lows
        p.chols = p.chols * scale[:, None]
        return p

    def log_density(self, x):
        """(n, n_bins) log bin probabilities."""
        tag = self.config.model
        if tag == "point":
            raise ConfigError("the point-estimate model has no density")
        if tag == "multiscale":
            return part.leaf_log_probs(self.tree, self.outputs(x))
        if tag == "mdn":
            with np.errstate(divide="ignore"):
                return np.log(mdn_discrete_density(self.gmm(x), self.grid))
        return softmax_log_probs(self.outputs(x))

    def density(self, x):
        return np.exp(self.log_density(x))

    def predict_point(self, x):
        tag = self.config.model
        if tag == "point":
            return self.outputs(x) * self._ranges + self._lows
        if tag == "mdn":
            return self.gmm(x).mean()
        return density_point_prediction(self.density(x), self.grid)

    def continuous_log_likelihood(self, x, targets):
        """Per-example MDN log density in target units."""
        if self.config.model != "mdn":
            raise ConfigError("continuous likelihood is only defined for the MDN")
        return mdn_log_likelihood(self.gmm(x), np.asarray(targets, dtype=float).reshape(-1, self.grid.ndim))

    # persistence -------------------------------------------------------

    def header(self, extra=None):
        h = {"model": self.config.model, "config": self.config.to_dict(), "grid": self.grid.to_dict(),
             "n_features": self.n_features}
        if self.tree is not None:
            h["tree"] = {"dims": list(self.tree.dims), "split_axes": list(self.tree.level_axes)}
        if self.delta is not None:
            h["penalty"] = {"order": self.delta.order, "graph_dims": list(self.delta.graph_dims)}
        if extra:
            h["extra"] = extra
        return h

    def to_bytes(self, extra=None):
        return checkpoint_bytes(self.nets, self.header(extra))

    def save(self, path, extra=None):
        atomic_write(path, self.to_bytes(extra))

    @classmethod
    def from_bytes(cls, data):
        nets, meta = nets_from_bytes(data)
        cfg = TrainConfig.from_dict(meta["config"])
        model = cls(cfg, DiscretizationGrid.from_dict(meta["grid"]), meta["n_features"])
        if len(nets) != len(model.nets):
            raise ConfigError("checkpoint network count does not match its configuration")
        model.nets = nets
        return model, meta

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
