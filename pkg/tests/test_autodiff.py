import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from r2r.arch import ArchSpec, build_arch
from r2r.autodiff import (Optimizer, backward, central_difference, cross_entropy, finite_diff_grad, lr_schedule,
                          optimizer_step)
from r2r.errors import LabelOutOfRange, NonFiniteGradient, NonFiniteLoss
from r2r.graph import ConvLayer, LayerNode, NetworkGraph
from r2r.morph import InitSpec, WidenSpec, r2_wider
from r2r.nonlinear import ReLU
from r2r.tensor import Kernel
from r2r.verify import gradient_check, random_network


def _two_layer(rng, dtype=np.float64, classes=10):
    a = ConvLayer(Kernel(rng.normal(0, 0.5, (4, 3, 3, 3)).astype(dtype), 1, 1), np.zeros(4, dtype), [ReLU()])
    head = ConvLayer(Kernel(np.zeros((classes, 4, 1, 1), dtype)), np.zeros(classes, dtype))
    return NetworkGraph((3, 6, 6), [LayerNode("a", a)], head)


def test_uniform_prediction_loss_is_log_classes():
    net = _two_layer(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3, 6, 6))
    loss, grads = backward(net, x, np.arange(5))
    assert abs(loss - math.log(10)) < 1e-12
    assert set(grads) == set(net.parameters())
    for k, g in grads.items():
        assert g.shape == net.parameters()[k].shape


def test_dead_path_gets_zero_gradient():
    rng = np.random.default_rng(2)
    net = _two_layer(rng)
    net.head.kernel.weight[:] = rng.normal(size=net.head.kernel.weight.shape)
    net.nodes[0].layer.sigma = [ReLU(subgradient_at_zero=0.0)]
    net.nodes[0].layer.kernel.weight[1] = 0
    net.nodes[0].layer.bias[1] = -1.0
    x = rng.normal(size=(3, 3, 6, 6))
    _, grads = backward(net, x, np.array([0, 1, 2]))
    assert np.all(grads["a.W"][1] == 0) and grads["a.b"][1] == 0
    assert abs(finite_diff_grad(net, x, np.array([0, 1, 2]), ("a.W", 27 + 4))) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cross_entropy_checks_labels():
    with pytest.raises(LabelOutOfRange):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    net = _two_layer(np.random.default_rng(0))
    net.head.bias[0] = np.inf
    with pytest.raises(NonFiniteLoss):
        backward(net, np.ones((1, 3, 6, 6)), np.array([1]))


def test_random_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = random_network(rng, np.float64, layers=3, input_shape=(3, 6, 6), classes=4, max_channels=8)
    x = rng.normal(size=(4, 3, 6, 6))
    worst, checked, _ = gradient_check(net, x, rng.integers(0, 4, 4), entries_per_param=6, rng=rng)
    assert checked > 20
    assert worst <= 1e-4


def test_central_difference_quadratic():
    assert abs(central_difference(lambda w: w * w, 3.0, 1e-5) - 6.0) < 1e-8


def test_sgd_single_step():
    net = _two_layer(np.random.default_rng(0))
    net.nodes[0].layer.bias[:] = 1.0
    grads = {"a.b": np.full(4, 2.0)}
    optimizer_step(Optimizer("sgd", lr=0.1), net, grads)
    npt.assert_allclose(net.nodes[0].layer.bias, 0.8, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_is_fixed_point(kind):
    net = build_arch(ArchSpec("SmallConv", 1 / 16), seed=0, dtype=np.float64)
    before = {k: v.copy() for k, v in net.parameters().items()}
    opt = Optimizer(kind, lr=0.01, momentum=0.9 if kind == "sgd" else 0.0)
    for _ in range(3):
        opt.step(net, {k: np.zeros_like(v) for k, v in before.items()})
    for k, v in net.parameters().items():
        npt.assert_array_equal(v, before[k])


def _scalar_adam(w, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(gs, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-2, 2))
def test_adam_matches_scalar_reference(gs, w0):
    net = _two_layer(np.random.default_rng(0))
    net.nodes[0].layer.bias[:] = w0
    opt = Optimizer("adam", lr=1e-3)
    for g in gs:
        opt.step(net, {"a.b": np.full(4, g)})
    npt.assert_allclose(net.nodes[0].layer.bias, _scalar_adam(w0, gs, 1e-3), rtol=0, atol=1e-10)


def test_adam_first_step_magnitude():
    net = _two_layer(np.random.default_rng(0))
    opt = Optimizer("adam", lr=1e-3)
    opt.step(net, {"a.b": np.ones(4)})
    npt.assert_allclose(net.nodes[0].layer.bias, -1e-3 / (1 + 1e-8), rtol=0, atol=1e-12)


def test_weight_decay_is_added_to_gradient():
    net = _two_layer(np.random.default_rng(0))
    net.nodes[0].layer.bias[:] = 2.0
    Optimizer("sgd", lr=0.5, weight_decay=0.1).step(net, {"a.b": np.zeros(4)})
    npt.assert_allclose(net.nodes[0].layer.bias, 2.0 - 0.5 * 0.2)


def test_non_finite_gradient():
    net = _two_layer(np.random.default_rng(0))
    with pytest.raises(NonFiniteGradient):
        Optimizer().step(net, {"a.b": np.array([0, np.nan, 0, 0])})


def test_lr_schedule():
    drops = [(25, 1 / 5)]
    assert lr_schedule(24, 3e-3, drops) == 3e-3
    assert abs(lr_schedule(25, 3e-3, drops) - 6e-4) < 1e-18
    assert all(lr_schedule(e, 0.1) == 0.1 for e in range(100))
    assert abs(lr_schedule(60, 1.0, [(10, 0.5), (50, 0.1)]) - 0.05) < 1e-15


def test_widened_pairs_get_mirrored_gradients():
    rng = np.random.default_rng(4)
    net = build_arch(ArchSpec("TinyResNet", 1 / 16), seed=4, dtype=np.float64)
    n = net.node("conv2_1a").layer.c_out
    r2_wider(net, WidenSpec("conv2_1a", 4, InitSpec(seed=9)))
    x = rng.normal(size=(6, 3, 32, 32))
    y = rng.integers(0, 10, 6)
    _, g = backward(net, x, y)
    gw = g["conv2_1a.W"]
    left, right = gw[n:n + 2], gw[n + 2:n + 4]
    scale = np.abs(left).max()
    assert scale > 0
    npt.assert_allclose(left, -right, rtol=0, atol=1e-6 * scale)
    opt = Optimizer("adam", lr=1e-3)
    opt.step(net, g)
    w = net.node("conv2_1a").layer.kernel.weight
    assert np.linalg.norm(w[n:n + 2] - w[n + 2:n + 4]) > 1e-8


def test_loss_decreases_under_sgd():
    from r2r.data import synthetic_dataset
    ds = synthetic_dataset(0, 64, 4, 0.0, n_val=8, shape=(3, 8, 8))
    rng = np.random.default_rng(5)
    a = ConvLayer(Kernel(rng.normal(0, 0.3, (6, 3, 3, 3)), 1, 1), np.zeros(6), [ReLU()])
    head = ConvLayer(Kernel(rng.normal(0, 0.1, (4, 6, 1, 1))), np.zeros(4))
    net = NetworkGraph((3, 8, 8), [LayerNode("a", a)], head)
    opt = Optimizer("sgd", lr=0.2, momentum=0.5)
    losses = []
    for _ in range(50):
        loss, g = backward(net, ds.x_train.astype(np.float64), ds.y_train)
        opt.step(net, g)
        losses.append(loss)
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert losses[-1] < 0.5 * losses[0]
