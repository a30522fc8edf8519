import os
import subprocess
import sys

import numpy as np
import pytest

from cdenets import _kernels as K
from cdenets.partition import SPLIT_EPS, build_tree

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("dims", [[2], [32], [8, 4]])
def test_path_kernels_agree(dims, rng):
    tree = build_tree(dims)
    logits = rng.normal(scale=4.0, size=(9, tree.n_nodes))
    logits[0, 0] = 40.0  # exercise the clamp
    labels = rng.integers(tree.n_leaves, size=9)
    args = (tree.path_nodes, tree.path_left, SPLIT_EPS)
    np.testing.assert_allclose(K.path_log_probs_numba(logits, *args), K.path_log_probs_numpy(logits, *args),
                               rtol=1e-12, atol=1e-14)
    ln, gn = K.path_bce_numba(logits, labels, *args)
    lp, gp = K.path_bce_numpy(logits, labels, *args)
    np.testing.assert_allclose(ln, lp, rtol=1e-12)
    np.testing.assert_allclose(gn, gp, rtol=1e-12, atol=1e-15)


@needs_numba
def test_rect_kernel_agrees(rng):
    means = rng.uniform(0.2, 0.8, size=(3, 2))
    chols = np.array([[[0.2, 0.0], [0.05, 0.1]], [[0.1, 0.0], [-0.03, 0.2]], [[0.3, 0.0], [0.0, 0.3]]])
    ex, ey = np.linspace(0, 1, 9), np.linspace(0, 1, 5)
    np.testing.assert_allclose(K.gmm_rect_probs_2d_numba(means, chols, ex, ey, 16),
                               K.gmm_rect_probs_2d_numpy(means, chols, ex, ey, 16), rtol=1e-10, atol=1e-15)


def test_env_flag_selects_numpy():
    code = "from cdenets import _kernels as K; print(K.USE_NUMBA, K.path_bce is K.path_bce_numpy)"
    env = dict(os.environ, CDENETS_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
