import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robustwrn.arch import build_network, parse_config
from robustwrn.attacks import (
    AttackConfig, attack, cw_margin_loss, fgsm, input_gradient, pgd, predict, project_linf, random_start, sign,
)
from robustwrn.nn import linear_model
from oracles import corner_max, cross_entropy_np, pgd_reference


@pytest.fixture(scope="module")
def toy_net():
    return build_network(parse_config("d1-1-1", "w1-1-1", 1, 3, (3, 8, 8)), seed=0)


def test_sign_of_zero_is_zero():
    assert np.array_equal(sign(np.array([-2.0, 0.0, 3.0])), [-1.0, 0.0, 1.0])


def test_projection_examples():
    x = np.array([0.5, 0.5])
    np.testing.assert_allclose(project_linf(np.array([0.9, 0.1]), x, 0.1), [0.6, 0.4])
    np.testing.assert_allclose(project_linf(np.array([1.5, -1]), np.array([0.98, 0.01]), 0.1), [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(0, 1)),
    arrays(np.float64, 6, elements=st.floats(-3, 3)),
    st.floats(0, 0.5),
)
def test_projection_lands_in_ball_and_bounds(x, cand, eps):
    p = project_linf(cand, x, eps)
    assert np.all(np.abs(p - x) <= eps) and np.all((p >= 0) & (p <= 1))
    # idempotent
    assert np.array_equal(project_linf(p, x, eps), p)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig(steps=-1)
    with pytest.raises(ValueError):
        AttackConfig(loss="hinge")
    c = AttackConfig.eval_preset(8 / 255)
    assert c.steps == 20 and np.isclose(c.step_size, 0.8 / 255)
    assert AttackConfig.from_dict(c.to_dict()) == c


def test_pgd_epsilon_zero_is_identity(toy_net, rng):
    x = rng.random((2, 3, 8, 8))
    assert np.array_equal(pgd(toy_net, x, np.array([0, 1]), AttackConfig(0.0, 5, 0.1)), x)
    assert np.array_equal(fgsm(toy_net, x, np.array([0, 1]), 0.0), x)


def test_fgsm_is_pgd_one_step_bitwise(toy_net, rng):
    x = rng.random((3, 3, 8, 8))
    y = np.array([0, 1, 2])
    eps = 8 / 255
    a = fgsm(toy_net, x, y, eps)
    b = pgd(toy_net, x, y, AttackConfig(eps, 1, eps, False))
    assert np.array_equal(a, b)


def test_pgd_matches_loop_reference_on_linear_model(rng):
    W = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    net = linear_model(W, b)
    x = rng.random(5)
    ref = pgd_reference(lambda xa: input_gradient(net, xa[None], np.array([1]))[0], x, 0.1, 7, 0.03)
    got = pgd(net, x[None], np.array([1]), AttackConfig(0.1, 7, 0.03))[0]
    np.testing.assert_allclose(got, ref, atol=1e-15)


def test_pgd_stays_in_ball_and_increases_loss(toy_net, rng):
    x = rng.random((4, 3, 8, 8))
    y = np.array([0, 1, 2, 0])
    cfg = AttackConfig(8 / 255, 10, 2 / 255, True)
    trace = []
    xa = pgd(toy_net, x, y, cfg, np.random.default_rng(0), trace)
    assert len(trace) == 10
    for t in trace:
        assert np.all(np.abs(t - x) <= cfg.epsilon + 1e-12)
    assert np.all((xa >= 0) & (xa <= 1))
    from robustwrn.nn import loss_tape

    clean = loss_tape(toy_net, x, y)[1].item()
    adv = loss_tape(toy_net, xa, y)[1].item()
    assert adv > clean


def test_pgd_random_start_is_seeded(toy_net, rng):
    x = rng.random((2, 3, 8, 8))
    y = np.array([0, 1])
    cfg = AttackConfig(8 / 255, 3, 2 / 255, True)
    a = pgd(toy_net, x, y, cfg, np.random.default_rng(7))
    b = pgd(toy_net, x, y, cfg, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_random_start_inside_box(rng):
    x = rng.random((100,))
    r = random_start(x, 0.05, rng)
    assert np.all(np.abs(r - x) <= 0.05) and np.all((r >= 0) & (r <= 1))


@pytest.mark.parametrize("seed", range(10))
def test_pgd_reaches_corner_optimum_binary_linear(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 13))
    W = rng.standard_normal((2, d))
    b = rng.standard_normal(2) * 0.1
    x = rng.random(d)
    y = int(rng.integers(2))
    eps = float(rng.uniform(0.01, 0.3))
    lo, hi = np.maximum(x - eps, 0), np.minimum(x + eps, 1)
    best, _ = corner_max(lambda v: cross_entropy_np(W, b, v, y), lo, hi)
    xa = pgd(linear_model(W, b), x[None], np.array([y]), AttackConfig.eval_preset(eps))[0]
    assert cross_entropy_np(W, b, xa, y) >= 0.999 * best


def test_cw_margin_loss_example():
    assert cw_margin_loss(np.array([[1.0, 3.0, 2.0]]), [0]) == 2.0
    assert cw_margin_loss(np.array([[5.0, 3.0, 2.0]]), [0]) == -2.0


def test_cw_margin_attack_flips_linear_model():
    net = linear_model(np.array([[1.0, 0.0], [0.0, 1.0]]))
    x = np.array([[0.55, 0.45]])
    xa = pgd(net, x, np.array([0]), AttackConfig(0.1, 20, 0.01, loss="cw-margin"))
    assert predict(net, xa)[0] == 1


def test_attack_batching_matches_single_call(toy_net, rng):
    x = rng.random((5, 3, 8, 8))
    y = np.array([0, 1, 2, 0, 1])
    cfg = AttackConfig(8 / 255, 3, 2 / 255)
    assert np.array_equal(attack(toy_net, x, y, cfg), attack(toy_net, x, y, cfg, batch_size=2))
