import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gestalt.errors import NoCachedForward, NonFiniteValue, ShapeMismatch, TooManyParameters
from gestalt.tensornet import (
    Adam,
    AvgPool,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    LeakyReLU,
    Network,
    ReLU,
    Reshape,
    Sigmoid,
    Tanh,
    Upsample,
    adam_step,
    grad_check,
)


def naive_conv(x, W, b, stride, pad):
    B, C, H, Wd = x.shape
    O, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (H + 2 * pad - k) // stride + 1, (Wd + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for n in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    s = b[o]
                    for c in range(C):
                        for a in range(k):
                            for d in range(k):
                                s += W[o, c, a, d] * xp[n, c, i * stride + a, j * stride + d]
                    out[n, o, i, j] = s
    return out


def naive_tconv(x, W, b, stride, pad):
    B, C, H, Wd = x.shape
    _, O, k, _ = W.shape
    oh, ow = (H - 1) * stride - 2 * pad + k, (Wd - 1) * stride - 2 * pad + k
    out = np.zeros((B, O, oh, ow)) + b[None, :, None, None]
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(Wd):
                    for o in range(O):
                        for a in range(k):
                            for d in range(k):
                                y, z = i * stride - pad + a, j * stride - pad + d
                                if 0 <= y < oh and 0 <= z < ow:
                                    out[n, o, y, z] += x[n, c, i, j] * W[c, o, a, d]
    return out


def test_identity_dense_forward_and_backward():
    d = Dense(4, 4)
    d.params["W"] = np.eye(4)
    d.params["b"] = np.zeros(4)
    net = Network([d], dtype=np.float64)
    x = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(net.forward(x), x)
    assert np.array_equal(net.backward(np.ones((2, 4))), np.ones((2, 4)))
    assert grad_check(net, x) < 1e-8


def test_zero_conv_gives_bias(rng):
    c = Conv2D(2, 3, 3, 1, 1, rng)
    c.params["W"][:] = 0
    c.params["b"] = np.array([0.0, 1.5, -2.0])
    out = Network([c], np.float64).forward(rng.standard_normal((1, 2, 5, 5)))
    assert np.array_equal(out, np.broadcast_to(c.params["b"][None, :, None, None], out.shape))


def test_two_layer_forward_matches_naive_loops(rng):
    c1 = Conv2D(2, 3, 3, 2, 1, rng)
    c2 = ConvTranspose2D(3, 2, 4, 2, 1, rng)
    for layer in (c1, c2):
        layer.params["b"] = rng.standard_normal(layer.params["b"].shape)
    net = Network([c1, ReLU(), c2], np.float64)
    x = rng.standard_normal((2, 2, 6, 6))
    h = np.maximum(naive_conv(x, c1.params["W"], c1.params["b"], 2, 1), 0)
    expected = naive_tconv(h, c2.params["W"], c2.params["b"], 2, 1)
    np.testing.assert_allclose(net.forward(x), expected, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 1, 3), (1, 2, 5)])
def test_conv_matches_naive(rng, stride, pad, k):
    c = Conv2D(3, 2, k, stride, pad, rng)
    x = rng.standard_normal((2, 3, 7, 7))
    out = Network([c], np.float64).forward(x)
    np.testing.assert_allclose(out, naive_conv(x, c.params["W"], c.params["b"], stride, pad), rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    conv = Conv2D(3, 4, 4, 2, 1, rng)
    net = Network([conv], np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    y = rng.standard_normal((2, 4, 4, 4))
    lhs = np.sum((net.forward(x) - conv.params["b"][None, :, None, None]) * y)
    rhs = np.sum(x * net.backward(y))
    assert lhs == pytest.approx(rhs, rel=1e-6)


LAYER_CASES = {
    "conv": (lambda r: Conv2D(2, 3, 3, 1, 1, r), (2, 2, 6, 6)),
    "conv_s2": (lambda r: Conv2D(2, 3, 4, 2, 1, r), (2, 2, 6, 6)),
    "tconv": (lambda r: ConvTranspose2D(2, 3, 4, 2, 1, r), (2, 2, 3, 3)),
    "dense": (lambda r: Dense(5, 4, r), (3, 5)),
    "relu": (lambda r: ReLU(), (3, 7)),
    "leaky_relu": (lambda r: LeakyReLU(0.2), (3, 7)),
    "sigmoid": (lambda r: Sigmoid(), (3, 7)),
    "tanh": (lambda r: Tanh(), (3, 7)),
    "avgpool": (lambda r: AvgPool(2), (2, 2, 4, 4)),
    "avgpool_adaptive": (lambda r: AvgPool(None, out_size=2), (2, 2, 6, 6)),
    "upsample": (lambda r: Upsample(2), (2, 2, 3, 3)),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    make, shape = LAYER_CASES[kind]
    layer = make(rng)
    for name in layer.params:
        layer.params[name] = rng.uniform(-1, 1, layer.params[name].shape)
    assert grad_check(Network([layer], np.float64), rng.standard_normal(shape), eps=1e-5, seed=seed) < 1e-3


def conv_relu_dense(rng):
    return Network([Conv2D(1, 3, 3, 1, 1, rng), ReLU(), Conv2D(3, 2, 4, 2, 1, rng), ReLU(), Flatten(),
                    Dense(2 * 3 * 3, 4, rng)], np.float64)


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    net = conv_relu_dense(rng)
    assert grad_check(net, rng.standard_normal((2, 1, 6, 6)), seed=seed) < 1e-3


def test_decoder_like_stack_gradients(rng):
    net = Network([Dense(3, 8, rng), ReLU(), Reshape((2, 2, 2)), ConvTranspose2D(2, 2, 4, 2, 1, rng), Tanh(),
                   Upsample(2), AvgPool(None, out_size=2), Flatten(), Dense(8, 1, rng), Sigmoid()], np.float64)
    assert grad_check(net, rng.standard_normal((2, 3))) < 1e-3


class BrokenConv(Conv2D):
    def backward(self, grad):
        dx = super().backward(grad)
        self.grads["W"] = self.grads["W"] * 1.5
        return dx


def test_grad_check_detects_corrupted_backward(rng):
    net = Network([BrokenConv(1, 2, 3, 1, 1, rng), ReLU(), Flatten(), Dense(2 * 5 * 5, 2, rng)], np.float64)
    assert grad_check(net, rng.standard_normal((1, 1, 5, 5))) > 1e-1


def test_grad_check_rejects_big_nets(rng):
    with pytest.raises(TooManyParameters):
        grad_check(Network([Dense(200, 100, rng)]), np.zeros((1, 200)))


def test_backward_before_forward():
    with pytest.raises(NoCachedForward):
        Network([Dense(2, 2)]).backward(np.zeros((1, 2)))


def test_shape_and_finiteness_errors(rng):
    with pytest.raises(ShapeMismatch):
        Network([Dense(3, 2, rng)]).forward(np.zeros((1, 4)))
    with pytest.raises(NonFiniteValue):
        Network([Dense(2, 2, rng)]).forward(np.array([[np.nan, 0.0]]))


def test_forward_deterministic(rng):
    net = conv_relu_dense(rng)
    x = rng.standard_normal((2, 1, 6, 6))
    assert np.array_equal(net.forward(x), net.forward(x))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_no_nonfinite_outputs_in_range(seed):
    rng = np.random.default_rng(seed)
    net = Network([Conv2D(1, 2, 3, 1, 1, rng), LeakyReLU(), ConvTranspose2D(2, 2, 4, 2, 1, rng), Sigmoid(),
                   AvgPool(2), Tanh(), Flatten(), Dense(2 * 6 * 6, 3, rng)], np.float64)
    for layer in net.layers:
        for k in layer.params:
            layer.params[k] = rng.uniform(-1, 1, layer.params[k].shape)
    out = net.forward(rng.uniform(-10, 10, (2, 1, 6, 6)))
    net.backward(np.ones_like(out))
    assert np.all(np.isfinite(out))


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    adam_step(opt, [np.zeros(2)])
    assert np.array_equal(p, [1.0, -2.0]) and opt.t == 1


def test_adam_descends():
    p = np.array([1.0])
    adam_step(Adam([p], lr=0.1), [np.array([1.0])])
    assert p[0] < 1.0


def test_adam_minimises_quadratic():
    p = np.array([0.0])
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.step([2 * (p - 3.0)])
    assert abs(p[0] - 3.0) < 0.1


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Adam([np.zeros(2)]).step([np.zeros(3)])
