import numpy as np
import numpy.testing as npt
import pytest

from r2r.arch import ArchSpec, build_arch
from r2r.errors import ShapeMismatch
from r2r.graph import (ConvLayer, LayerNode, NetworkGraph, ShortcutOp, forward, identity_shortcut, layer_forward,
                       shortcut_apply, validate_graph)
from r2r.nonlinear import BatchNorm, ReLU
from r2r.tensor import Kernel, conv2d


def _eye(c):
    return Kernel(np.eye(c)[:, :, None, None])


def test_identity_layer():
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    npt.assert_array_equal(layer_forward(ConvLayer(_eye(3), np.zeros(3)), x), x)


def test_negative_preactivation_is_dead():
    layer = ConvLayer(Kernel(np.zeros((2, 3, 3, 3)), 1, 1), -np.ones(2), [ReLU()])
    assert np.all(layer_forward(layer, np.ones((3, 5, 5))) == 0)


def test_bn_relu_layer_matches_reference():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    g, be = rng.uniform(0.5, 2, 3).astype(np.float32), rng.normal(size=3).astype(np.float32)
    layer = ConvLayer(Kernel(w, 1, 1), b, [BatchNorm(gamma=g, beta=be), ReLU()])
    x = rng.normal(size=(4, 2, 6, 6)).astype(np.float32)
    y = layer_forward(layer, x, train=True)
    z = np.stack([conv2d(Kernel(w.astype(np.float64), 1, 1), xi.astype(np.float64)) for xi in x]) + b[:, None, None]
    mu = z.mean(axis=(0, 2, 3), keepdims=True)
    var = z.var(axis=(0, 2, 3), keepdims=True)
    ref = np.maximum((z - mu) / np.sqrt(var + 1e-5) * g[:, None, None] + be[:, None, None], 0)
    npt.assert_allclose(y, ref, atol=1e-5)


def test_pass_through_net_gives_channel_means():
    x = np.random.default_rng(2).normal(size=(5, 3, 4, 4))
    net = NetworkGraph((3, 4, 4), [LayerNode("a", ConvLayer(_eye(3), np.zeros(3)))], ConvLayer(_eye(3), np.zeros(3)))
    logits, probs = forward(net, x)
    npt.assert_allclose(logits, x.mean(axis=(2, 3)), rtol=1e-12)
    npt.assert_allclose(probs.sum(axis=1), 1)


def test_zero_residual_branch():
    rng = np.random.default_rng(3)
    first = ConvLayer(Kernel(rng.normal(size=(4, 3, 3, 3)), 1, 1), rng.normal(size=4), [ReLU()])
    second = ConvLayer(Kernel(np.zeros((4, 4, 3, 3)), 1, 1), np.zeros(4))
    head = ConvLayer(Kernel(rng.normal(size=(2, 4, 1, 1))), np.zeros(2))
    x = rng.normal(size=(2, 3, 5, 5))
    with_res = NetworkGraph((3, 5, 5), [LayerNode("a", first), LayerNode("b", second, "a", identity_shortcut(4))],
                            head)
    only_first = NetworkGraph((3, 5, 5), [LayerNode("a", first)], head)
    npt.assert_array_equal(forward(with_res, x)[0], forward(only_first, x)[0])


def _scripted(net, x):
    # direct re-evaluation from the primitives, node by node
    vals = {"input": x}
    cur = x
    for nd in net.nodes:
        z = conv2d(nd.layer.kernel, cur) + nd.layer.bias[None, :, None, None]
        for s in nd.layer.sigma:
            z = s.forward(z)
        if nd.shortcut is not None:
            src = vals[nd.shortcut_source]
            op = nd.shortcut
            if op.kind == "projection":
                r = conv2d(op.kernel, src) + op.bias[None, :, None, None]
            else:
                r = src[:, :op.in_channels]
            pad = np.zeros((r.shape[0], op.out_channels - r.shape[1]) + r.shape[2:], r.dtype)
            z = z + np.concatenate([r, pad], axis=1)
        vals[nd.id] = cur = z
    h, w = cur.shape[2:]
    pooled = np.zeros(cur.shape[:2], cur.dtype)
    for i in range(h):
        for j in range(w):
            pooled += cur[:, :, i, j]
    return pooled, cur


def test_resnet_matches_scripted_evaluation():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8), seed=4)
    x = np.random.default_rng(4).normal(size=(3, 3, 32, 32)).astype(np.float32)
    tape = {}
    logits, _ = forward(net, x, tape=tape)
    _, last = _scripted(net, x)
    assert tape["head"]["last_shape"] == last.shape
    pooled = last.mean(axis=(2, 3))
    ref = pooled @ net.head.kernel.weight[:, :, 0, 0].T + net.head.bias
    npt.assert_allclose(logits, ref, rtol=1e-5, atol=1e-6)


def test_resnet_body_bitwise_against_script():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8), seed=5)
    x = np.random.default_rng(5).normal(size=(2, 3, 32, 32)).astype(np.float32)
    _, last = _scripted(net, x)
    from r2r.graph import shortcut_apply as sa
    cur = x
    outs = {"input": x}
    for nd in net.nodes:
        y = layer_forward(nd.layer, cur)
        if nd.shortcut is not None:
            y = y + sa(nd.shortcut, outs[nd.shortcut_source])
        outs[nd.id] = cur = y
    npt.assert_array_equal(cur, last)


def test_forward_is_deterministic():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8), seed=6)
    x = np.random.default_rng(6).normal(size=(4, 3, 32, 32)).astype(np.float32)
    a, b = forward(net, x, train=True)[0], forward(net, x, train=True)[0]
    npt.assert_array_equal(a, b)


def test_forward_shape_error():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8))
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((1, 3, 16, 16), np.float32))


def test_validate_fresh_and_broken():
    net = build_arch(ArchSpec("ResNetCifar18", 1 / 8))
    assert validate_graph(net) == []
    bad = net.copy()
    bad.nodes[2].shortcut_source = bad.nodes[5].id
    assert any("cycle" in p for p in validate_graph(bad))
    bad = net.copy()
    bad.nodes[1].layer.bias = np.zeros(3, np.float32)
    bad.nodes[0].layer.kernel.weight = bad.nodes[0].layer.kernel.weight[:, :2]
    problems = validate_graph(bad)
    assert any("bias length" in p for p in problems)
    assert len(problems) >= 2


def test_shortcut_apply():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 5, 5))
    npt.assert_array_equal(shortcut_apply(identity_shortcut(4), x), x)
    x[2] = x[1]
    op = ShortcutOp("identity", 4, 4, folds=[(0, 1, 2)])
    npt.assert_array_equal(shortcut_apply(op, x), x)
    pad = shortcut_apply(ShortcutOp("zeropad", 4, 6), x)
    assert pad.shape == (6, 5, 5) and np.all(pad[4:] == 0)
    k = Kernel(rng.normal(size=(3, 4, 1, 1)), 2)
    b = rng.normal(size=3)
    proj = shortcut_apply(ShortcutOp("projection", 4, 3, k, b), x)
    npt.assert_array_equal(proj, conv2d(k, x) + b[:, None, None])
    with pytest.raises(ShapeMismatch):
        shortcut_apply(identity_shortcut(6), x)


def test_consumers():
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8))
    cons = net.consumers("conv1")
    assert ("conv", "conv2_1a") in cons and ("shortcut", "conv2_1b") in cons
    assert net.consumers("conv3_2b") == [("conv", "head")]
