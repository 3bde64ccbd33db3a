import numpy as np
import pytest

from robustwrn import tensor as T
from robustwrn.arch import build_network, parse_config
from robustwrn.nn import forward_network, loss_tape
from oracles import central_difference, conv2d_loops


def _grad_check(fn, inputs, wrt, h=1e-6, tol=1e-6):
    """fn(tensors, tape) -> scalar Tensor. Compares tape gradient of input ``wrt`` with central differences."""
    ts = [T.Tensor(a.copy()) for a in inputs]
    tape = T.Tape(params={f"p{i}": t for i, t in enumerate(ts)})
    fn(ts, tape)
    g = T.gradients(tape)[f"p{wrt}"]

    def f(a):
        args = [T.Tensor(b) for b in inputs]
        args[wrt] = T.Tensor(a)
        return fn(args, None).item()

    base = inputs[wrt]
    for idx in np.ndindex(base.shape):
        fd = central_difference(f, base, idx, h)
        assert abs(fd - g[idx]) <= tol * max(1.0, abs(fd)), (idx, fd, g[idx])


def test_tensor_basics():
    t = T.Tensor([[1, 2], [3, 4]])
    assert t.shape == (2, 2) and t.size == 4 and t.dtype == np.float64
    assert T.Tensor([5.0]).item() == 5.0


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2)])
def test_conv2d_matches_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, stride, pad), atol=1e-12)


def test_conv2d_examples():
    x = np.ones((1, 1, 3, 3))
    assert T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 3, 3))), 1, 0).data.item() == 9.0
    y = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 3, 3))), 1, 1).data
    assert y.shape == (1, 1, 3, 3) and y[0, 0, 1, 1] == 9 and y[0, 0, 0, 0] == 4


def test_conv2d_shape_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(rng, stride, pad):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3 if pad else 1, 3 if pad else 1))
    fn = lambda ts, tape: T.sum_squares(T.conv2d(ts[0], ts[1], stride, pad, tape), tape)
    _grad_check(fn, [x, w], 0)
    _grad_check(fn, [x, w], 1)


def test_linear_and_loss_gradients(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    y = np.array([0, 2, 1, 2])
    fn = lambda ts, tape: T.cross_entropy(T.linear(ts[0], ts[1], ts[2], tape), y, tape)
    for i in range(3):
        _grad_check(fn, [x, w, b], i)
    fn2 = lambda ts, tape: T.cw_margin(T.linear(ts[0], ts[1], ts[2], tape), y, tape)
    _grad_check(fn2, [x, w, b], 0)


def test_relu_pool_add_gradients(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    fn = lambda ts, tape: T.sum_squares(
        T.global_avg_pool(T.relu(T.add(ts[0], T.scale(ts[1], 0.5, tape), tape), tape), tape), tape
    )
    _grad_check(fn, [a, b], 0)
    _grad_check(fn, [a, b], 1)


def test_batchnorm_train_gradients(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    g = rng.standard_normal(3)
    b = rng.standard_normal(3)

    def fn(ts, tape):
        out = T.batchnorm(ts[0], ts[1], ts[2], np.zeros(3), np.ones(3), True, tape=tape)
        return T.sum_squares(T.relu(out, tape), tape)

    for i in range(3):
        _grad_check(fn, [x, g, b], i, tol=1e-5)


def test_batchnorm_modes(rng):
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    y = T.batchnorm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True, momentum=1.0).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    # momentum 1 copies the batch statistics (unbiased variance) into the buffers
    np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, x.var(axis=(0, 2, 3), ddof=1))
    e = T.batchnorm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, False).data
    np.testing.assert_allclose(e, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))
    with pytest.raises(ValueError):
        T.batchnorm(T.Tensor(x[:1]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, True)


def test_add_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))


def test_backward_errors():
    with pytest.raises(ValueError):
        T.backward(T.Tape())
    tape = T.Tape()
    T.scale(T.Tensor(np.ones(3)), 2.0, tape)
    with pytest.raises(ValueError):
        T.backward(tape)


def test_unused_param_gets_zero_grad(rng):
    a, b = T.Tensor(rng.standard_normal(3)), T.Tensor(rng.standard_normal(3))
    tape = T.Tape(params={"a": a, "b": b})
    T.sum_squares(a, tape)
    g = T.gradients(tape)
    assert np.array_equal(g["b"], np.zeros(3))
    np.testing.assert_allclose(g["a"], 2 * a.data)


def test_network_input_and_param_gradients_fd(rng):
    spec = parse_config("d1-1-1", "w1-1-1", 1, 3, (3, 8, 8))
    net = build_network(spec, seed=3, dtype=np.float64)
    x = rng.random((2, 3, 8, 8))
    y = np.array([0, 2])
    _, _, tape = loss_tape(net, x, y, mode="eval")
    pg, xg = T.gradients(tape, "both")

    def loss_x(xx):
        return loss_tape(net, xx, y, mode="eval")[1].item()

    for _ in range(10):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        fd = central_difference(loss_x, x, idx, 1e-6)
        assert abs(fd - xg[idx]) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9
    p = net.named_parameters()["stage2.block1.conv1.weight"]
    orig = p.data

    def loss_w(ww):
        p.data = ww
        v = loss_tape(net, x, y, mode="eval")[1].item()
        p.data = orig
        return v

    for _ in range(10):
        idx = tuple(int(rng.integers(s)) for s in orig.shape)
        fd = central_difference(loss_w, orig, idx, 1e-6)
        assert abs(fd - pg["stage2.block1.conv1.weight"][idx]) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9


def test_forward_network_shape_error():
    spec = parse_config("d1-1-1", "w1-1-1", 1, 3, (3, 8, 8))
    net = build_network(spec)
    with pytest.raises(T.ShapeError, match="8"):
        forward_network(net, np.zeros((1, 3, 7, 7)))


def test_float32_network_stays_float32(rng):
    spec = parse_config("d1-1-1", "w1-1-1", 1, 3, (3, 8, 8))
    net = build_network(spec, dtype=np.float32)
    out, _ = forward_network(net, rng.random((2, 3, 8, 8)).astype(np.float32))
    assert out.data.dtype == np.float32
