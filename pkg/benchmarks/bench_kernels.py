"""Time the numba and pure-numpy variants of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 5]

Both variants are imported directly, so the CDENETS_DISABLE_NUMBA flag does
not matter here.  The first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from cdenets import _kernels as K
from cdenets.partition import SPLIT_EPS, build_tree


def _best(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for dims in ((32,), (32, 32)):
        tree = build_tree(dims)
        logits = rng.normal(size=(256, tree.n_nodes))
        labels = rng.integers(tree.n_leaves, size=256)
        name = "x".join(map(str, dims))
        yield (f"path_log_probs {name}", K.path_log_probs_numpy, K.path_log_probs_numba,
               (logits, tree.path_nodes, tree.path_left, SPLIT_EPS))
        yield (f"path_bce {name}", K.path_bce_numpy, K.path_bce_numba,
               (logits, labels, tree.path_nodes, tree.path_left, SPLIT_EPS))
    means = rng.uniform(0.3, 0.7, size=(5, 2))
    chols = np.zeros((5, 2, 2))
    chols[:, 0, 0] = rng.uniform(0.05, 0.2, 5)
    chols[:, 1, 0] = rng.uniform(-0.05, 0.05, 5)
    chols[:, 1, 1] = rng.uniform(0.05, 0.2, 5)
    edges = np.linspace(0.0, 1.0, 33)
    yield ("gmm_rect_probs_2d 32x32 M=5", K.gmm_rect_probs_2d_numpy, K.gmm_rect_probs_2d_numba,
           (means, chols, edges, edges, 32))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, np_fn, nb_fn, fargs in cases(rng):
        t_np = _best(np_fn, fargs, args.repeat)
        t_nb = _best(nb_fn, fargs, args.repeat)
        print(f"{name:34s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
