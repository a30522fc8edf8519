"""Recursive dyadic partitions of a binned target space.

Internal nodes are stored in heap order: the root is node 0 and the node
with binary label ``gamma`` (length ``L``) has index ``2**L - 1 + int(gamma, 2)``.
Appending ``0`` to ``gamma`` gives the left child, which owns the lower half
of the parent's index range along the node's split axis.

Bins are flattened row-major over ``dims``.  Split axes cycle round-robin
over the dimensions, skipping any dimension that has already been halved
down to single bins.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError

SPLIT_EPS = 1e-7

LEFT = "left"
RIGHT = "right"


def _is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n >= 2 and (n & (n - 1)) == 0


def _axis_schedule(dims):
    remaining = [int(d).bit_length() - 1 for d in dims]
    schedule = []
    while any(remaining):
        for axis, left in enumerate(remaining):
            if left:
                schedule.append(axis)
                remaining[axis] -= 1
    return schedule


@dataclass(frozen=True, eq=False)
class PartitionTree:
    """Complete binary tree over ``prod(dims)`` terminal bins.

    ``path_nodes[b]`` and ``path_left[b]`` give, for terminal bin ``b``, the
    heap index of every node on its root-to-leaf path and whether the path
    takes the left branch there.
    """

    dims: tuple
    depth: int
    level_axes: tuple
    path_nodes: np.ndarray = field(repr=False)
    path_left: np.ndarray = field(repr=False)
    leaf_codes: np.ndarray = field(repr=False)

    @property
    def n_leaves(self):
        return 1 << self.depth

    @property
    def n_nodes(self):
        return self.n_leaves - 1

    @property
    def split_axis(self):
        """Axis halved by each internal node, in heap order."""
        return np.repeat(np.asarray(self.level_axes, dtype=np.int64), [1 << lv for lv in range(self.depth)])

    def node_index(self, gamma):
        if len(gamma) >= self.depth or any(ch not in "01" for ch in gamma):
            raise ValueError(f"{gamma!r} is not an internal node of a depth-{self.depth} tree")
        return (1 << len(gamma)) - 1 + (int(gamma, 2) if gamma else 0)

    def node_label(self, index):
        if not 0 <= index < self.n_nodes:
            raise IndexError(f"node index {index} out of range")
        level = (index + 1).bit_length() - 1
        offset = index - ((1 << level) - 1)
        return format(offset, f"0{level}b") if level else ""

    def node_bins(self, gamma):
        """Flat bin indices contained in the cell labelled ``gamma``."""
        level = len(gamma)
        prefix = int(gamma, 2) if gamma else 0
        codes = self.leaf_codes
        mask = (codes >> (self.depth - level)) == prefix
        return np.flatnonzero(mask)

    def level_partition(self, level):
        """Bin sets of every cell in the level-``level`` partition, left to right."""
        if not 0 <= level <= self.depth:
            raise ValueError(f"level must lie in [0, {self.depth}]")
        return [
            self.node_bins(format(v, f"0{level}b") if level else "")
            for v in range(1 << level)
        ]


def build_tree(dims):
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if not dims:
        raise ConfigError("dims must contain at least one dimension")
    for axis, d in enumerate(dims):
        if not _is_power_of_two(d):
            raise ConfigError(f"bin count {d} for dimension {axis} is not a power of two >= 2")
    axes = _axis_schedule(dims)
    depth = len(axes)
    p = 1 << depth

    # leaf code: bits of the root-to-leaf path, MSB first (0 = left)
    codes = np.arange(p, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(depth - 1, -1, -1)) & 1
    per_axis = np.zeros((p, len(dims)), dtype=np.int64)
    for level, axis in enumerate(axes):
        per_axis[:, axis] = (per_axis[:, axis] << 1) | bits[:, level]
    flat = np.ravel_multi_index(per_axis.T, dims)

    leaf_codes = np.empty(p, dtype=np.int64)
    leaf_codes[flat] = codes
    path_bits = bits[leaf_codes]

    path_nodes = np.empty((p, depth), dtype=np.int64)
    for level in range(depth):
        prefix = leaf_codes >> (depth - level)
        path_nodes[:, level] = (1 << level) - 1 + prefix
    path_left = path_bits == 0

    for arr in (path_nodes, path_left, leaf_codes):
        arr.setflags(write=False)
    return PartitionTree(
        dims=dims,
        depth=depth,
        level_axes=tuple(axes),
        path_nodes=path_nodes,
        path_left=path_left,
        leaf_codes=leaf_codes,
    )


def leaf_path(tree, bin_index):
    """Root-to-leaf decisions for ``bin_index`` as ``(node_label, branch)`` pairs."""
    if not 0 <= int(bin_index) < tree.n_leaves:
        raise IndexError(f"bin index {bin_index} outside [0, {tree.n_leaves})")
    nodes = tree.path_nodes[bin_index]
    left = tree.path_left[bin_index]
    return [(tree.node_label(int(n)), LEFT if l else RIGHT) for n, l in zip(nodes, left)]


def clamp_splits(splits):
    return np.clip(splits, SPLIT_EPS, 1.0 - SPLIT_EPS)


def terminal_probabilities(tree, splits):
    """Leaf masses from left-branch probabilities ``splits`` (one per node).

    Accepts a single vector of length ``n_nodes`` or a batch of shape
    ``(n, n_nodes)``.  No clamping is applied here; pass model outputs
    through :func:`clamp_splits` first.
    """
    w = np.asarray(splits, dtype=float)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    if w.shape[1] != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} split probabilities, got {w.shape[1]}")
    factors = np.where(tree.path_left[None], w[:, tree.path_nodes], 1.0 - w[:, tree.path_nodes])
    probs = factors.prod(axis=2)
    return probs[0] if single else probs


def empirical_splits(tree, masses):
    """Left-child mass over parent mass for every node; inverse of terminal_probabilities."""
    q = np.asarray(masses, dtype=float)
    if q.shape != (tree.n_leaves,):
        raise ValueError(f"expected {tree.n_leaves} masses, got shape {q.shape}")
    # leaf masses in tree (code) order, then sum pairs upward
    level = q[np.argsort(tree.leaf_codes)]
    totals = [level]
    while level.size > 1:
        level = level[0::2] + level[1::2]
        totals.append(level)
    totals.reverse()
    splits = np.empty(tree.n_nodes)
    for lv in range(tree.depth):
        parent = totals[lv]
        left = totals[lv + 1][0::2]
        splits[(1 << lv) - 1:(1 << (lv + 1)) - 1] = left / parent
    return splits


def leaf_log_probs(tree, logits):
    """Batch log leaf masses from node logits, with clamped split probabilities."""
    logits = np.ascontiguousarray(logits, dtype=float)
    return _kernels.path_log_probs(logits, tree.path_nodes, tree.path_left, SPLIT_EPS)


def path_cross_entropy(tree, logits, labels):
    """Per-example summed BCE along the observed paths and its logit gradient."""
    logits = np.ascontiguousarray(logits, dtype=float)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= tree.n_leaves):
        raise ValueError("bin label outside the tree's leaf range")
    return _kernels.path_bce(logits, labels, tree.path_nodes, tree.path_left, SPLIT_EPS)
