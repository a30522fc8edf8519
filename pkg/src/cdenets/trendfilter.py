"""Graph trend-filtering penalty operators over a lattice of bins.

The base operator is the oriented incidence matrix of the axis-aligned
nearest-neighbour graph.  Higher orders alternate transposed and plain
left-multiplications by it::

    D0 = B
    D1 = B.T @ D0        (graph Laplacian)
    D2 = B   @ D1
    D3 = B.T @ D2 ...

so every order has one column per bin; rows alternate between edges (even
order) and bins (odd order).
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SMOOTH_EPS = 1e-6


def grid_incidence(dims):
    """Edge-by-vertex incidence matrix of a row-major lattice, as CSR.

    The row for edge ``(u, v)`` with ``u < v`` holds -1 at ``u`` and +1 at ``v``.
    Edges are listed axis by axis, each in flat order of ``u``.
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if not dims:
        raise ValueError("dims must be non-empty")
    if any(d < 1 for d in dims):
        raise ValueError(f"every lattice dimension must be >= 1, got {dims}")
    p = int(np.prod(dims))
    idx = np.arange(p).reshape(dims)
    tails, heads = [], []
    for axis in range(len(dims)):
        lo = [slice(None)] * len(dims)
        hi = [slice(None)] * len(dims)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        tails.append(idx[tuple(lo)].ravel())
        heads.append(idx[tuple(hi)].ravel())
    tails = np.concatenate(tails)
    heads = np.concatenate(heads)
    m = tails.size
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([tails, heads]).ravel()
    vals = np.tile([-1.0, 1.0], m)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, p))


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    matrix: sp.csr_matrix
    order: int
    graph_dims: tuple

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n_bins(self):
        return self.matrix.shape[1]

    def toarray(self):
        return self.matrix.toarray()


def penalty_matrix(base, k, graph_dims=None):
    """k-th order trend-filtering operator built from incidence matrix ``base``."""
    if int(k) != k or k < 0:
        raise ValueError(f"penalty order must be a non-negative integer, got {k}")
    base = sp.csr_matrix(base)
    bt = base.T.tocsr()
    delta = base
    for step in range(1, int(k) + 1):
        delta = (bt if step % 2 else base) @ delta
    delta = sp.csr_matrix(delta)
    delta.eliminate_zeros()
    delta.sort_indices()
    return PenaltyMatrix(delta, int(k), tuple(graph_dims) if graph_dims is not None else ())


def lattice_penalty(dims, k):
    return penalty_matrix(grid_incidence(dims), k, graph_dims=tuple(int(d) for d in np.atleast_1d(dims)))


def _residuals(delta, psi):
    psi = np.asarray(psi, dtype=float)
    if psi.shape[-1] != delta.n_bins:
        raise ValueError(f"logit length {psi.shape[-1]} does not match operator width {delta.n_bins}")
    if psi.ndim == 1:
        return delta.matrix @ psi
    return (delta.matrix @ psi.T).T


def penalty_value(delta, psi):
    """``||delta @ psi||_1``; for a batch ``psi`` of shape (n, p), one value per row."""
    return np.abs(_residuals(delta, psi)).sum(axis=-1)


def penalty_subgradient(delta, psi):
    """``delta.T @ sign(delta @ psi)`` with sign(0) = 0, row-wise for batches."""
    s = np.sign(_residuals(delta, psi))
    if s.ndim == 1:
        return delta.matrix.T @ s
    return (delta.matrix.T @ s.T).T


def smooth_penalty_value(delta, psi, eps=SMOOTH_EPS):
    r = _residuals(delta, psi)
    return np.sqrt(r * r + eps * eps).sum(axis=-1)


def smooth_penalty_gradient(delta, psi, eps=SMOOTH_EPS):
    r = _residuals(delta, psi)
    g = r / np.sqrt(r * r + eps * eps)
    if g.ndim == 1:
        return delta.matrix.T @ g
    return (delta.matrix.T @ g.T).T
