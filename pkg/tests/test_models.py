import math

import mpmath
import numpy as np
import pytest
from scipy.stats import multivariate_normal

from cdenets.data import DiscretizationGrid
from cdenets.errors import ConfigError
from cdenets.models import (
    CHOL_FLOOR,
    CdeModel,
    GmmParams,
    TrainConfig,
    cde_tf_loss,
    density_point_prediction,
    mdn_discrete_density,
    mdn_loss,
    mdn_output_dim,
    mdn_unpack,
    multinomial_loss,
    multiscale_density,
    multiscale_loss,
    point_estimate_loss,
)
from cdenets.partition import build_tree
from cdenets.trendfilter import lattice_penalty
from gradcheck import GRID_1D, GRID_2D, gradient_check, kink_free
from oracles import dense_mvn_pdf, split_mass_1d, trapezoid_bin_masses


def _raw_diag(value):
    return math.log(math.expm1(value - CHOL_FLOOR))


# --- multiscale -------------------------------------------------------------

def test_multiscale_single_split_at_zero_logit():
    loss, _ = multiscale_loss(build_tree([2]), np.zeros((1, 1)), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_multiscale_perfect_logits_hit_clamp_floor():
    tree = build_tree([4])
    labels = np.array([0, 3])
    logits = np.array([[50.0, 50.0, 0.0], [-50.0, 0.0, -50.0]])
    loss, grad = multiscale_loss(tree, logits, labels)
    assert loss == pytest.approx(-2 * math.log1p(-1e-7), rel=1e-6)
    assert np.all(grad == 0)


def test_multiscale_loss_hand_summed():
    tree = build_tree([4])
    logits = np.array([[0.3, -1.2, 0.8], [1.5, 0.2, -0.7], [-0.4, 2.0, 1.1]])
    labels = np.array([1, 2, 3])
    sig = lambda r: 1 / (1 + math.exp(-r))  # noqa: E731
    # bin 1: root left, node "0" right; bin 2: root right, node "1" left; bin 3: right, right
    expected = (
        -math.log(sig(0.3)) - math.log(1 - sig(-1.2))
        - math.log(1 - sig(1.5)) - math.log(sig(-0.7))
        - math.log(1 - sig(-0.4)) - math.log(1 - sig(1.1))
    ) / 3
    loss, _ = multiscale_loss(tree, logits, labels)
    assert loss == pytest.approx(expected, abs=1e-14)


def test_multiscale_density_cases():
    np.testing.assert_allclose(multiscale_density(build_tree([8]), np.zeros(7)), np.full((1, 8), 1 / 8))
    np.testing.assert_allclose(multiscale_density(build_tree([2]), [math.log(7 / 3)]), [[0.7, 0.3]], atol=1e-15)


def test_multiscale_density_matches_recursive_oracle(rng):
    tree = build_tree([16])
    logits = rng.normal(scale=2.0, size=tree.n_nodes)
    w = 1 / (1 + np.exp(-logits))
    oracle = split_mass_1d({tree.node_label(i): w[i] for i in range(tree.n_nodes)}, 16)
    dens = multiscale_density(tree, logits)[0]
    np.testing.assert_allclose(dens, oracle, rtol=1e-12)
    assert abs(dens.sum() - 1) < 1e-9


# --- softmax heads -----------------------------------------------------------

def test_tf_lambda_zero_is_multinomial_bitwise(rng):
    delta = lattice_penalty([16], 2)
    logits = rng.normal(size=(7, 16))
    labels = rng.integers(16, size=7)
    a = cde_tf_loss(delta, 0.0, logits, labels)
    b = multinomial_loss(logits, labels)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_tf_constant_logits():
    delta = lattice_penalty([8], 1)
    loss, _ = cde_tf_loss(delta, 5.0, np.full((3, 8), 0.7), np.array([0, 4, 7]))
    assert loss == pytest.approx(math.log(8), abs=1e-14)


def test_tf_hand_computed():
    delta = lattice_penalty([4], 0)
    psi = np.array([[0.0, 1.0, 3.0, 2.0]])
    nll = -(3.0 - math.log(1 + math.e + math.e ** 3 + math.e ** 2))
    loss, _ = cde_tf_loss(delta, 1.0, psi, np.array([2]))
    assert loss == pytest.approx(nll + 4.0, abs=1e-14)


def test_tf_shape_mismatch():
    with pytest.raises(ValueError):
        cde_tf_loss(lattice_penalty([4], 0), 1.0, np.zeros((1, 5)), np.array([0]))


def test_multinomial_cases(rng):
    assert multinomial_loss(np.zeros((2, 32)), np.array([3, 9]))[0] == pytest.approx(math.log(32))
    favoured = np.zeros((1, 32))
    favoured[0, 5] = 2.0
    assert multinomial_loss(favoured, np.array([5]))[0] < math.log(32)
    logits = rng.normal(scale=3.0, size=(6, 10))
    labels = rng.integers(10, size=6)
    mpmath.mp.dps = 40
    expected = sum(
        mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row)) - mpmath.mpf(float(row[c]))
        for row, c in zip(logits, labels)) / 6
    assert multinomial_loss(logits, labels)[0] == pytest.approx(float(expected), abs=1e-12)


# --- mixture density network ----------------------------------------------------

def test_mdn_standard_normal_at_mode():
    out = np.array([[0.0, 0.0, _raw_diag(1.0)]])
    loss, _ = mdn_loss(out, np.array([[0.0]]), 1)
    assert loss == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)


def test_mdn_identical_components_collapse(rng):
    one = np.array([[0.0, 0.4, _raw_diag(0.7)]])
    two = np.array([[0.0, 0.0, 0.4, 0.4, _raw_diag(0.7), _raw_diag(0.7)]])
    y = rng.normal(size=(1, 1))
    assert mdn_loss(two, y, 2)[0] == pytest.approx(mdn_loss(one, y, 1)[0], abs=1e-13)


def test_mdn_matches_dense_pdf_oracle(rng):
    m, d = 3, 2
    out = rng.normal(size=(4, mdn_output_dim(m, d)))
    y = rng.normal(size=(4, d))
    params = mdn_unpack(out, m, d)
    cov = params.covariances()
    expected = -np.mean([
        math.log(sum(params.weights[i, k] * dense_mvn_pdf(y[i], params.means[i, k], cov[i, k]) for k in range(m)))
        for i in range(4)])
    assert mdn_loss(out, y, m)[0] == pytest.approx(expected, abs=1e-8)


def test_mdn_covariances_positive_definite(rng):
    for d in (1, 2):
        out = rng.normal(scale=5.0, size=(200, mdn_output_dim(3, d)))
        cov = mdn_unpack(out, 3, d).covariances()
        if d == 1:
            assert np.all(cov[..., 0, 0] > 0)
        else:
            a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
            largest = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
            # product of eigenvalues is det = a c - b^2; divide to avoid cancellation
            smallest = (a * c - b * b) / largest
            assert np.all(smallest > 0)
            np.testing.assert_allclose(cov, np.swapaxes(cov, -1, -2))


def _gmm_1d(weights, means, sds):
    w = np.asarray([weights], dtype=float)
    return GmmParams(w, np.asarray(means, dtype=float).reshape(1, -1, 1),
                     np.asarray(sds, dtype=float).reshape(1, -1, 1, 1))


def test_discrete_density_sharp_and_flat():
    grid = DiscretizationGrid((0.0,), (1.0,), (8,))
    sharp = mdn_discrete_density(_gmm_1d([1.0], [0.3125], [1e-3]), grid)[0]
    assert sharp[2] > 1 - 1e-12
    flat = mdn_discrete_density(_gmm_1d([1.0], [0.5], [1e3]), grid)[0]
    np.testing.assert_allclose(flat, 1 / 8, atol=1e-6)


def test_discrete_density_matches_quadrature_1d():
    grid = DiscretizationGrid((-1.0,), (2.0,), (8,))
    weights, means, sds = [0.2, 0.5, 0.3], [-0.2, 0.7, 1.9], [0.3, 0.15, 0.4]
    masses = trapezoid_bin_masses(weights, means, sds, grid.edges(0))
    got = mdn_discrete_density(_gmm_1d(weights, means, sds), grid)[0]
    np.testing.assert_allclose(got, masses / masses.sum(), atol=1e-6)


def test_discrete_density_2d_matches_rectangle_cdf():
    grid = DiscretizationGrid((0.0, 0.0), (1.0, 1.0), (4, 4))
    chol = np.array([[[0.2, 0.0], [0.08, 0.15]], [[0.1, 0.0], [-0.05, 0.25]]])
    means = np.array([[0.4, 0.5], [0.7, 0.3]])
    weights = np.array([0.6, 0.4])
    params = GmmParams(weights[None], means[None], chol[None])
    got = mdn_discrete_density(params, grid)[0].reshape(4, 4)
    ex, ey = grid.edges(0), grid.edges(1)
    want = np.zeros((4, 4))
    for w, mu, L in zip(weights, means, chol):
        dist = multivariate_normal(mu, L @ L.T)
        cdf = np.array([[dist.cdf([x, y]) for y in ey] for x in ex])
        want += w * (cdf[1:, 1:] - cdf[:-1, 1:] - cdf[1:, :-1] + cdf[:-1, :-1])
    np.testing.assert_allclose(got, want / want.sum(), atol=1e-5)


# --- point estimates -----------------------------------------------------------

def test_point_loss_cases(rng):
    y = rng.normal(size=(5, 1))
    assert point_estimate_loss(y, y)[0] == 0.0
    assert point_estimate_loss(y + 1, y)[0] == pytest.approx(1.0)
    out = np.array([[1.0], [2.0], [4.0]])
    assert point_estimate_loss(out, np.array([0.0, 2.0, 1.0]))[0] == pytest.approx((1 + 0 + 9) / 3)


def test_density_point_prediction():
    grid = DiscretizationGrid((0.0,), (8.0,), (4,))
    np.testing.assert_allclose(density_point_prediction([0.1, 0.2, 0.3, 0.4], grid), [[5.0]])
    np.testing.assert_allclose(density_point_prediction([0, 0, 1.0, 0], grid), [[5.0]])
    np.testing.assert_allclose(density_point_prediction(np.full(4, 0.25), grid), [[4.0]])
    grid2 = DiscretizationGrid((0.0, -1.0), (2.0, 1.0), (2, 2))
    np.testing.assert_allclose(density_point_prediction([0, 0, 0, 1.0], grid2), [[1.5, 0.5]])


# --- composed with networks -----------------------------------------------------

@pytest.mark.parametrize("tag,cfg", [
    ("multiscale", {}), ("multinomial", {}), ("mdn", {"components": 3}), ("point", {}),
    ("trendfilter", {"lam": 0.3, "k": 1}),
])
def test_loss_gradients_through_network(tag, cfg):
    seeds = [s for s in range(40) if tag != "trendfilter" or kink_free(s, cfg["k"])][:3]
    for seed in seeds:
        assert gradient_check(tag, seed, **cfg) < 1e-4


@pytest.mark.parametrize("tag", ["multiscale", "mdn", "point", "multinomial"])
def test_two_dimensional_gradients(tag):
    assert gradient_check(tag, 7, grid=GRID_2D) < 1e-4


def test_per_node_multiscale_gradients():
    assert gradient_check("multiscale", 3, per_node=True) < 1e-4


def _separable(n=200, seed=0):
    r = np.random.default_rng(seed)
    cls = r.integers(2, size=n)
    x = np.column_stack([cls * 2.0 - 1.0, r.normal(scale=0.1, size=n)])
    y = np.where(cls == 1, 0.8, 0.2) + r.normal(scale=0.05, size=n)
    return x, y[:, None]


@pytest.mark.parametrize("tag", ["multiscale", "trendfilter", "multinomial", "mdn", "point"])
def test_training_loss_decreases(tag):
    x, y = _separable()
    grid = DiscretizationGrid.fit(y, [16])
    model = CdeModel(TrainConfig(model=tag, lam=0.01, k=1, epochs=10, seed=1), grid, 2)
    history = model.fit(x, y)
    assert history[-1] < history[0]
    dens = model.density(x[:5]) if tag != "point" else None
    if dens is not None:
        np.testing.assert_allclose(dens.sum(axis=1), 1.0, atol=1e-6)


def test_training_is_deterministic():
    x, y = _separable()
    grid = DiscretizationGrid.fit(y, [16])
    runs = []
    for _ in range(2):
        model = CdeModel(TrainConfig(model="trendfilter", lam=0.1, k=2, epochs=3, seed=5), grid, 2)
        model.fit(x, y)
        runs.append(model.to_bytes())
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tmp_path):
    x, y = _separable()
    grid = DiscretizationGrid.fit(y, [16])
    model = CdeModel(TrainConfig(model="mdn", components=2, epochs=2), grid, 2)
    model.fit(x, y)
    path = tmp_path / "m.ckpt"
    model.save(path, extra={"note": 1})
    loaded, meta = CdeModel.load(path)
    assert meta["model"] == "mdn" and meta["extra"] == {"note": 1}
    np.testing.assert_array_equal(loaded.log_density(x), model.log_density(x))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(model="forest")
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(components=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"model": "mdn", "dropout": 0.5})


def test_point_model_has_no_density():
    model = CdeModel(TrainConfig(model="point"), GRID_1D, 3)
    with pytest.raises(ConfigError):
        model.log_density(np.zeros((1, 3)))
