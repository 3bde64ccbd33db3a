import csv
import math

import numpy as np
import pytest

from robustwrn import tensor as T
from robustwrn.arch import LayerShape, build_network, parse_config
from robustwrn.bounds import (
    conv_bound, conv_operator_matrix, conv_to_matrix, estimate_sigma, gram_jacobi_norm, mc_singular_values,
    mlp_bound, network_bound, power_iteration, residual_bound, spectral_norm,
)
from oracles import conv2d_loops


def test_mlp_bound_examples():
    assert mlp_bound([1, 1], [1]) == 2
    assert mlp_bound([4, 9], [0.5]) == 2.5
    assert mlp_bound([4, 4, 4], [1, 1]) == 16
    with pytest.raises(ValueError):
        mlp_bound([4, 4], [1, 1])


def test_conv_bound_examples():
    assert conv_bound(3, 3, 1, 1, 1) == 4
    assert conv_bound(5, 3, 4, 9, 0.1) == pytest.approx(1.9)
    assert conv_bound(4, 4, 4, 9, 1.0) == 4 * 2 + 3
    with pytest.raises(ValueError):
        conv_bound(2, 3, 1, 1, 1)


def test_residual_bound_examples():
    assert residual_bound([0.0, 0.0]) == 1
    assert residual_bound([2, 3]) == 7
    with pytest.raises(ValueError):
        residual_bound([])


def test_spectral_norm_examples(rng):
    assert spectral_norm(np.eye(3)) == pytest.approx(1)
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3)
    a = rng.standard_normal((20, 30))
    oracle = gram_jacobi_norm(a)
    assert abs(spectral_norm(a, method="power-iteration") - oracle) / oracle < 1e-5
    assert abs(spectral_norm(a, method="dense-exact") - oracle) / oracle < 1e-12


def test_spectral_norm_homogeneous(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    sh = LayerShape("conv", 3, 4, 3, 1, 6, "c")
    base = spectral_norm(w, sh)
    assert spectral_norm(-2.5 * w, sh) == pytest.approx(2.5 * base, rel=1e-9)


def test_spectral_norm_conv_methods_agree(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    for stride in (1, 2):
        sh = LayerShape("conv", 3, 4, 3, stride, 8, "c")
        exact = spectral_norm(w, sh, "circulant-exact")
        pi = spectral_norm(w, sh, "power-iteration", tol=1e-10, max_iter=2000)
        assert pi == pytest.approx(exact, rel=1e-6)
    with pytest.raises(ValueError):
        spectral_norm(w, LayerShape("conv", 3, 4, 3, 1, 17, "c"), "circulant-exact")


def test_power_iteration_reports_non_convergence(rng):
    a = rng.standard_normal((50, 50))
    res = power_iteration(lambda v: a @ v, lambda u: a.T @ u, 50, tol=1e-15, max_iter=3)
    assert not res.converged and res.iterations == 3 and res.value > 0


def test_conv_to_matrix_examples(rng):
    assert np.array_equal(conv_to_matrix(np.full((1, 1, 1, 1), 2.5), 2), 2.5 * np.eye(4))
    assert conv_to_matrix(rng.standard_normal((2, 3, 3, 3)), 5).shape == (18, 75)
    k = rng.standard_normal((1, 1, 3, 3))
    M = conv_to_matrix(k, 4)
    for _ in range(50):
        x = rng.standard_normal((1, 1, 4, 4))
        assert np.abs(M @ x.ravel() - conv2d_loops(x, k).ravel()).max() < 1e-10
    with pytest.raises(ValueError):
        conv_to_matrix(k, 2)


def test_conv_operator_matrix_strided_padded(rng):
    k = rng.standard_normal((2, 3, 3, 3))
    M = conv_operator_matrix(k, 6, stride=2, padding=1)
    x = rng.standard_normal((1, 3, 6, 6))
    np.testing.assert_allclose(M @ x.ravel(), conv2d_loops(x, k, 2, 1).ravel(), atol=1e-12)


def test_estimate_sigma(rng):
    s = estimate_sigma(np.array([1.0, -1.0]))
    assert s.mean == 0 and s.std == 1
    g = estimate_sigma(np.random.default_rng(0).normal(0, 0.04, 10**5))
    assert 0.039 <= g.std <= 0.041 and abs(g.excess_kurtosis) < 0.1
    assert estimate_sigma(np.full(5, 3.0)).degenerate
    with pytest.raises(ValueError):
        estimate_sigma(np.array([1.0]))


def test_mc_examples():
    one = mc_singular_values(1, 1, 4000, seed=0)
    assert one.mean_lambda_max == pytest.approx(math.sqrt(2 / math.pi), abs=4 * one.se_lambda_max)
    st = mc_singular_values(400, 100, 200, seed=0)
    lo, hi = st.bracket
    assert lo + 5 * st.se_lambda_max <= st.mean_lambda_max <= hi - 5 * st.se_lambda_max
    scaled = mc_singular_values(400, 100, 200, seed=0, sigma=3.0)
    assert scaled.mean_lambda_max == pytest.approx(3 * st.mean_lambda_max, abs=2 * scaled.se_lambda_max)
    with pytest.raises(ValueError):
        mc_singular_values(3, 4, 5)


def test_mc_is_seeded():
    assert mc_singular_values(30, 10, 20, seed=5) == mc_singular_values(30, 10, 20, seed=5)


def _toy_net(seed=0):
    return build_network(parse_config("d1-1-1", "w1-1-1", 1, 3, (3, 8, 8)), seed=seed)


def test_network_bound_zero_weights():
    net = build_network(parse_config("d2-1-1", "w1-1-1", 1, 3, (3, 8, 8)))
    for b in net.blocks():
        b.conv1.weight.data[...] = 0
        b.conv2.weight.data[...] = 0
    rep = network_bound(net)
    assert rep.block_bounds[0] == pytest.approx(1.0)  # identity shortcut only
    # the whole-network form is n + prod(L_block) times the plain factors
    plain = [lb.spectral_norm for lb in rep.per_layer if lb.name in ("stem", "fc")]
    n = len(rep.block_bounds)
    assert rep.residual_form_bound == pytest.approx(math.prod(plain) * (n + math.prod(rep.block_bounds)))


def test_network_bound_all_zero_blocks_is_n_plus_one():
    net = build_network(parse_config("d3-0-0", "w1-0-0", 1, 3, (3, 8, 8)))
    for b in net.blocks():
        b.conv1.weight.data[...] = 0
        b.conv2.weight.data[...] = 0
    rep = network_bound(net)
    plain = math.prod(lb.spectral_norm for lb in rep.per_layer if lb.name in ("stem", "fc"))
    assert rep.residual_form_bound / plain == pytest.approx(3 + 1)


def test_network_bound_scaling_increases_product():
    net = _toy_net()
    before = network_bound(net)
    for b in net.blocks():
        b.conv1.weight.data *= 1.5
        b.conv2.weight.data *= 1.5
    after = network_bound(net)
    assert after.product_bound > before.product_bound
    for b0, b1, blk in zip(before.block_bounds, after.block_bounds, net.blocks()):
        if blk.shortcut is None:
            assert b1 - 1 == pytest.approx((b0 - 1) * 1.5**2, rel=1e-6)


def test_product_bound_is_product_of_terms():
    rep = network_bound(_toy_net())
    assert rep.product_bound == pytest.approx(math.prod(lb.spectral_norm for lb in rep.per_layer), rel=1e-9)
    th = network_bound(_toy_net(), "theorem-sigma")
    assert th.product_bound == pytest.approx(math.prod(lb.bound_term for lb in th.per_layer), rel=1e-9)


def test_network_bound_dominates_finite_differences(rng):
    # the L2 bound must dominate ||f(x) - f(x')||_2 / ||x - x'||_2 for random nearby pairs
    net = _toy_net(2)
    rep = network_bound(net)
    x = rng.random((20, 3, 8, 8))
    d = rng.standard_normal(x.shape) * 1e-3
    fx = net(x)
    fy = net(x + d)
    ratios = np.linalg.norm((fy - fx).reshape(20, -1), axis=1) / np.linalg.norm(d.reshape(20, -1), axis=1)
    assert ratios.max() <= rep.residual_form_bound


def test_bound_report_csv(tmp_path):
    rep = network_bound(_toy_net())
    rep.write_csv(tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["layer_index", "kind", "m", "k", "w_in", "w_out", "sigma_hat", "bound_term", "spectral_norm"]
    assert any(r[1] == "residual_form_bound" for r in rows)
