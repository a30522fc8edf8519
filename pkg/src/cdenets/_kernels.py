"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``CDENETS_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``<name>_numpy`` / ``<name>_numba`` so tests and the benchmark
can compare them directly.
"""
import math
import os

import numpy as np
from scipy.special import ndtr

_flag = os.environ.get("CDENETS_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# leaf log-probabilities of a dyadic tree from per-node logits
# ---------------------------------------------------------------------------

def path_log_probs_numpy(logits, path_nodes, path_left, eps):
    w = 1.0 / (1.0 + np.exp(-logits))
    w = np.clip(w, eps, 1.0 - eps)
    log_left = np.log(w)
    log_right = np.log1p(-w)
    out = np.zeros((logits.shape[0], path_nodes.shape[0]))
    for d in range(path_nodes.shape[1]):
        nodes = path_nodes[:, d]
        out += np.where(path_left[:, d], log_left[:, nodes], log_right[:, nodes])
    return out


def _path_log_probs_loop(logits, path_nodes, path_left, eps):
    n, n_nodes = logits.shape
    p, depth = path_nodes.shape
    log_left = np.empty(n_nodes)
    log_right = np.empty(n_nodes)
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(n_nodes):
            w = 1.0 / (1.0 + math.exp(-logits[i, j]))
            if w < eps:
                w = eps
            elif w > 1.0 - eps:
                w = 1.0 - eps
            log_left[j] = math.log(w)
            log_right[j] = math.log1p(-w)
        for leaf in range(p):
            s = 0.0
            for d in range(depth):
                node = path_nodes[leaf, d]
                if path_left[leaf, d]:
                    s += log_left[node]
                else:
                    s += log_right[node]
            out[i, leaf] = s
    return out


path_log_probs_numba = _njit(_path_log_probs_loop)


# ---------------------------------------------------------------------------
# binary cross-entropy summed along each example's observed root-to-leaf path
# ---------------------------------------------------------------------------

def path_bce_numpy(logits, labels, path_nodes, path_left, eps):
    rows = np.arange(logits.shape[0])[:, None]
    nodes = path_nodes[labels]
    left = path_left[labels]
    r = logits[rows, nodes]
    w = 1.0 / (1.0 + np.exp(-r))
    wc = np.clip(w, eps, 1.0 - eps)
    losses = -np.where(left, np.log(wc), np.log1p(-wc)).sum(axis=1)
    active = (w > eps) & (w < 1.0 - eps)
    g = np.where(active, w - left, 0.0)
    grad = np.zeros_like(logits)
    np.add.at(grad, (np.broadcast_to(rows, nodes.shape), nodes), g)
    return losses, grad


def _path_bce_loop(logits, labels, path_nodes, path_left, eps):
    n = logits.shape[0]
    depth = path_nodes.shape[1]
    losses = np.zeros(n)
    grad = np.zeros_like(logits)
    for i in range(n):
        leaf = labels[i]
        s = 0.0
        for d in range(depth):
            node = path_nodes[leaf, d]
            w = 1.0 / (1.0 + math.exp(-logits[i, node]))
            active = w > eps and w < 1.0 - eps
            wc = min(max(w, eps), 1.0 - eps)
            if path_left[leaf, d]:
                s -= math.log(wc)
                if active:
                    grad[i, node] += w - 1.0
            else:
                s -= math.log1p(-wc)
                if active:
                    grad[i, node] += w
        losses[i] = s
    return losses, grad


path_bce_numba = _njit(_path_bce_loop)


# ---------------------------------------------------------------------------
# bivariate normal rectangle probabilities on a grid
# ---------------------------------------------------------------------------
# For L = [[a, 0], [b, c]], y | x ~ N(mu_y + (b / a)(x - mu_x), c^2), so each
# cell is a 1D integral over x of the x-marginal times a conditional CDF
# difference; the x integral uses n_sub midpoints per bin.

def gmm_rect_probs_2d_numpy(means, chols, edges_x, edges_y, n_sub):
    m = means.shape[0]
    nx = edges_x.shape[0] - 1
    ny = edges_y.shape[0] - 1
    out = np.empty((m, nx, ny))
    for k in range(m):
        a, b, c = chols[k, 0, 0], chols[k, 1, 0], chols[k, 1, 1]
        mx, my = means[k]
        for ix in range(nx):
            h = (edges_x[ix + 1] - edges_x[ix]) / n_sub
            xs = edges_x[ix] + h * (np.arange(n_sub) + 0.5)
            z = (xs - mx) / a
            px = np.exp(-0.5 * z * z) / (a * math.sqrt(2.0 * math.pi)) * h
            cond_mean = my + (b / a) * (xs - mx)
            cdf = ndtr((edges_y[None, :] - cond_mean[:, None]) / c)
            out[k, ix] = px @ np.diff(cdf, axis=1)
    return out


def _gmm_rect_loop(means, chols, edges_x, edges_y, n_sub):
    m = means.shape[0]
    nx = edges_x.shape[0] - 1
    ny = edges_y.shape[0] - 1
    out = np.zeros((m, nx, ny))
    cdf = np.empty(ny + 1)
    norm = 1.0 / math.sqrt(2.0 * math.pi)
    for k in range(m):
        a = chols[k, 0, 0]
        b = chols[k, 1, 0]
        c = chols[k, 1, 1]
        mx = means[k, 0]
        my = means[k, 1]
        for ix in range(nx):
            h = (edges_x[ix + 1] - edges_x[ix]) / n_sub
            for s in range(n_sub):
                x = edges_x[ix] + h * (s + 0.5)
                z = (x - mx) / a
                px = math.exp(-0.5 * z * z) * norm / a * h
                cm = my + (b / a) * (x - mx)
                for iy in range(ny + 1):
                    cdf[iy] = 0.5 * math.erfc(-((edges_y[iy] - cm) / c) / math.sqrt(2.0))
                for iy in range(ny):
                    out[k, ix, iy] += px * (cdf[iy + 1] - cdf[iy])
    return out


gmm_rect_probs_2d_numba = _njit(_gmm_rect_loop)


if USE_NUMBA:
    path_log_probs = path_log_probs_numba
    path_bce = path_bce_numba
    gmm_rect_probs_2d = gmm_rect_probs_2d_numba
else:
    path_log_probs = path_log_probs_numpy
    path_bce = path_bce_numpy
    gmm_rect_probs_2d = gmm_rect_probs_2d_numpy
