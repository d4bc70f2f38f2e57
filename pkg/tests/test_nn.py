import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setpool import nn
from setpool.nn import DenseNet, Layer


def linear(W, b, act="identity"):
    return DenseNet([Layer(np.array(W, float), np.array(b, float), act)])


def reference_forward(net, x):
    # written independently of nn.forward
    acts = {"identity": lambda z: z, "tanh": np.tanh, "relu": lambda z: np.maximum(z, 0),
            "softplus": lambda z: np.log1p(np.exp(z))}
    for layer in net.layers:
        x = acts[layer.activation](layer.W @ x + layer.b)
    return x


def test_identity_layer_passes_input_through():
    y, _ = nn.forward(linear(np.eye(2), [0, 0]), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0])


def test_zero_weights_give_bias():
    y, _ = nn.forward(linear(np.zeros((1, 4)), [3.0]), np.array([0.3, -2.0, 5.0, 1.0]))
    np.testing.assert_array_equal(y, [3.0])


def test_forward_matches_reference(rng):
    net = DenseNet.create([5, 7, 3], ["tanh", "tanh"], rng)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(nn.forward(net, x)[0], reference_forward(net, x), rtol=0, atol=1e-12)


def test_forward_is_bitwise_deterministic(rng):
    net = DenseNet.create([4, 6, 2], ["tanh", "identity"], rng)
    x = rng.standard_normal((3, 4))
    assert nn.forward(net, x)[0].tobytes() == nn.forward(net, x)[0].tobytes()


def test_linear_backward_input_gradient_is_weight_row(rng):
    W = rng.standard_normal((2, 3))
    net = linear(W, [0.0, 0.0])
    _, tape = nn.forward(net, rng.standard_normal(3))
    _, dx = nn.backward(net, tape, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(dx, W[0])


def test_zero_upstream_gives_zero_gradient(rng):
    net = DenseNet.create([4, 5, 2], ["tanh", "identity"], rng)
    _, tape = nn.forward(net, rng.standard_normal(4))
    grads, dx = nn.backward(net, tape, np.zeros(2))
    assert all(not g.any() for g in grads) and not dx.any()


@pytest.mark.parametrize("acts", [("tanh", "identity"), ("relu", "softplus"), ("softplus", "tanh")])
def test_backward_matches_finite_differences(rng, acts):
    net = DenseNet.create([4, 6, 3], list(acts), rng)
    x = rng.standard_normal((5, 4))
    up = rng.standard_normal((5, 3))
    _, tape = nn.forward(net, x)
    grads, dx = nn.backward(net, tape, up)
    assert nn.grad_check(lambda: float(np.sum(up * net(x))), net.params(), grads) < 1e-4
    assert nn.grad_check(lambda: float(np.sum(up * net(x))), [x], [dx]) < 1e-4


def test_stale_tape_rejected(rng):
    net = DenseNet.create([3, 2], ["identity"], rng)
    _, tape = nn.forward(net, np.ones(3))
    nn.sgd_step(net, [np.ones_like(a) for a in net.params()], 0.1)
    with pytest.raises(nn.TapeError):
        nn.backward(net, tape, np.ones(2))
    with pytest.raises(nn.TapeError):
        nn.backward(net, None, np.ones(2))


def test_softmax_xent_uniform_and_saturated():
    assert nn.softmax_xent(np.array([0.0, 0.0]), 0)[0] == pytest.approx(np.log(2), abs=1e-12)
    assert nn.softmax_xent(np.array([100.0, 0.0]), 0)[0] < 1e-10


def test_softmax_xent_gradient(rng):
    logits = rng.standard_normal(6)
    _, d = nn.softmax_xent(logits, 2)
    h = 1e-6
    num = [(nn.softmax_xent(logits + h * e, 2)[0] - nn.softmax_xent(logits - h * e, 2)[0]) / (2 * h)
           for e in np.eye(6)]
    assert np.max(np.abs(num - d)) < 1e-6


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.data())
def test_softmax_xent_nonnegative(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, d = nn.softmax_xent(np.array(logits), label)
    assert loss >= 0 and abs(d.sum()) < 1e-9


def test_sgd_zero_gradient_leaves_net_unchanged(rng):
    net = DenseNet.create([3, 4, 2], ["tanh", "identity"], rng)
    before = [a.copy() for a in net.params()]
    nn.sgd_step(net, net.zeros_like(), 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_sgd_scalar_arithmetic():
    net = linear([[1.0]], [0.0])
    nn.sgd_step(net, [np.array([[2.0]]), np.array([0.0])], 0.1)
    assert net.layers[0].W[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_two_steps_equal_one_summed_step(rng):
    a = DenseNet.create([3, 2], ["identity"], rng)
    b = a.copy()
    g1 = [rng.standard_normal(x.shape) for x in a.params()]
    g2 = [rng.standard_normal(x.shape) for x in a.params()]
    nn.sgd_step(a, g1, 0.1)
    nn.sgd_step(a, g2, 0.1)
    nn.sgd_step(b, [x + y for x, y in zip(g1, g2)], 0.1)
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_allclose(x, y, atol=1e-14)


def test_sgd_rejects_nan(rng):
    net = DenseNet.create([2, 2], ["identity"], rng)
    with pytest.raises(FloatingPointError):
        nn.sgd_step(net, [np.full((2, 2), np.nan), np.zeros(2)], 0.1)


def test_grad_check_quadratic():
    p = np.array([3.0])
    assert nn.grad_check(lambda: float(p[0] ** 2), [p], [np.array([6.0])]) < 1e-9


def test_grad_check_detects_wrong_gradient():
    p = np.array([3.0])
    assert nn.grad_check(lambda: float(p[0] ** 2), [p], [np.array([6.6])]) > 1e-2


def test_flatten_roundtrip(rng):
    arrays = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
    back = nn.unflatten(nn.flatten(arrays), arrays)
    assert all(np.array_equal(a, b) for a, b in zip(arrays, back))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31))
def test_checkpoint_roundtrip(dims, seed):
    rng = np.random.default_rng(seed)
    acts = [nn.ACTIVATIONS[int(i)] for i in rng.integers(0, 4, len(dims) - 1)]
    net = DenseNet.create(dims, acts, rng)
    back = nn.net_from_bytes(nn.net_to_bytes(net))
    assert back.dims == net.dims and back.activations == net.activations
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.net_from_bytes(b"NOTANET" + bytes(20))


def test_create_rejects_mismatched_activation_count(rng):
    with pytest.raises(ValueError):
        DenseNet.create([3, 4, 2], ["tanh"], rng)


def test_glorot_bounds(rng):
    net = DenseNet.create([10, 30], ["tanh"], rng)
    assert np.abs(net.layers[0].W).max() <= np.sqrt(6 / 40)
