"""The ten numbered acceptance criteria, each at its stated tolerance.

The training-based criteria (8-10) take several minutes in total.
"""

import time

import numpy as np
import pytest

from r2r import experiments, verify
from r2r.arch import ArchSpec, build_arch
from r2r.autodiff import Optimizer, backward
from r2r.data import synthetic_dataset
from r2r.graph import ConvLayer, LayerNode, NetworkGraph, forward
from r2r.metrics import conv_flops, count_flops
from r2r.morph import InitSpec, WidenSpec, net2wider, r2_wider, widen_all
from r2r.tensor import Kernel

from test_metrics import _TALLY


def _detail(record_property, text):
    record_property("detail", text)


@pytest.mark.acceptance(1, "function preservation suite")
def test_ac1_preservation(record_property):
    t0 = time.perf_counter()
    results = [verify.preservation_suite(kind, dt, trials=50)
               for kind in ("r2_wider", "r2_deeper", "net2wider", "net2deeper", "netmorph_wider")
               for dt in (np.float32, np.float64)]
    secs = time.perf_counter() - t0
    worst = {f"{r.name}/{r.dtype}": r.max_dev for r in results}
    _detail(record_property, f"{secs:.0f}s, r2 max dev {max(worst[k] for k in worst if k.startswith('r2')):.1g}, "
                             f"others max {max(worst[k] for k in worst if not k.startswith('r2')):.2g}")
    print(verify.format_table(results))
    assert all(r.passed for r in results)
    assert secs < 120


@pytest.mark.acceptance(2, "zero-init block")
def test_ac2_zero_block(record_property):
    r = verify.zero_block_suite(trials=100)
    _detail(record_property, f"max |out| {r.max_dev}, sigmoid rejected, {r.seconds:.1f}s")
    assert r.passed and r.max_dev == 0.0


@pytest.mark.acceptance(3, "residual recursion")
def test_ac3_recursion(record_property):
    rs = [verify.residual_recursion_suite(dt, trials=10) for dt in (np.float32, np.float64)]
    _detail(record_property, ", ".join(f"{r.dtype} max dev {r.max_dev}" for r in rs))
    assert all(r.passed for r in rs)


@pytest.mark.acceptance(4, "gradient correctness")
def test_ac4_gradients(record_property):
    r = verify.gradient_suite(nets=10)
    _detail(record_property, f"max rel err {r.max_dev:.2g}, {r.note}, {r.seconds:.0f}s")
    assert r.max_dev <= 1e-4 and r.seconds < 300


@pytest.mark.acceptance(5, "symmetry breaking")
def test_ac5_symmetry(record_property):
    ds = synthetic_dataset(0, 64, 10, 0.5, n_val=10)
    net = build_arch(ArchSpec("TinyResNet", 1 / 8), seed=0)
    n = net.node("conv2_1a").layer.c_out
    m = net.node("conv2_1b").layer.c_in
    r2_wider(net, WidenSpec("conv2_1a", 4, InitSpec(seed=1)))
    w = net.node("conv2_1a").layer.kernel.weight
    u = net.node("conv2_1b").layer.kernel.weight
    assert np.array_equal(w[n:n + 2], w[n + 2:n + 4]) and np.array_equal(u[:, m:m + 2], -u[:, m + 2:m + 4])
    _, g = backward(net, ds.x_train, ds.y_train)
    Optimizer("adam", lr=1e-3).step(net, g)
    w = net.node("conv2_1a").layer.kernel.weight
    u = net.node("conv2_1b").layer.kernel.weight
    gap = float(np.linalg.norm((w[n:n + 2] - w[n + 2:n + 4]).astype(np.float64)))
    _detail(record_property, f"||W_L - W_R|| = {gap:.3g}")
    assert gap > 1e-8
    assert not np.array_equal(u[:, m:m + 2], -u[:, m + 2:m + 4])


@pytest.mark.acceptance(6, "Net2WiderNet hand example")
def test_ac6_net2wider_example(record_property):
    a = ConvLayer(Kernel(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None, None]), np.zeros(2))
    head = ConvLayer(Kernel(np.array([[5.0, 6.0]])[:, :, None, None]), np.zeros(1))
    net = NetworkGraph((2, 1, 1), [LayerNode("a", a)], head)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -3.0]])[:, :, None, None]
    before = forward(net, x)[0]
    net2wider(net, "a", 3, mapping=[0, 1, 0])
    u1 = net.node("a").layer.kernel.weight[:, :, 0, 0]
    u2 = net.head.kernel.weight[:, :, 0, 0]
    _detail(record_property, f"U1={u1.tolist()} U2={u2.tolist()}")
    assert u1.tolist() == [[1, 2], [3, 4], [1, 2]] and u2.tolist() == [[2.5, 6, 2.5]]
    assert (u2 @ u1).tolist() == [[23, 34]]
    assert np.array_equal(forward(net, x)[0], before)


@pytest.mark.acceptance(7, "FLOP oracle")
def test_ac7_flops(record_property):
    net = build_arch(ArchSpec("ResNetCifar10", 1 / 8))
    fc = count_flops(net)
    tally = {name: 2 * co * ci * k * k * h * w + st * co * h * w + extra
             for name, co, ci, k, h, w, st, extra in _TALLY}
    tally["head"] = 16 * 16 + 2 * 10 * 16 + 10
    assert fc.layers == tally and fc.forward_flops_per_example == 1_177_418

    def convs(g):
        shapes = g.shapes()
        out = {}
        for i, nd in enumerate(g.nodes):
            _, h, w = shapes[g.input_of(i)]
            out[nd.id] = conv_flops(nd.layer.kernel, *nd.layer.kernel.output_hw(h, w))
        return out

    before = convs(net)
    widen_all(net, "r2_wider", 1.5)
    after = convs(net)
    ratios = {k: after[k] / before[k] for k in before}
    _detail(record_property, f"forward {fc.forward_flops_per_example:,}; widen ratios "
                             f"{sorted(set(ratios.values()))}")
    assert ratios.pop("conv1") == 1.5
    assert set(ratios.values()) == {2.25}


@pytest.fixture(scope="module")
def trend():
    return experiments.faster_training_trend(seeds=(0, 1, 2))


@pytest.mark.acceptance(8, "faster-training trend")
def test_ac8_trend(trend, record_property):
    ratio = "never reached" if trend.flop_ratio is None else f"{trend.flop_ratio:.3f}"
    _detail(record_property, f"target {trend.target:.4f}, grown final {trend.teacher_curve[-1]:.4f}, "
                             f"FLOP ratio {ratio} (budget {trend.budget}), {trend.seconds / 60:.1f} min")
    assert trend.seconds < 20 * 60
    assert trend.passed


@pytest.mark.acceptance(9, "transform-instant continuity")
def test_ac9_continuity(trend, record_property):
    rows = experiments.transform_continuity(seed=0)
    rows += [{"kind": e["kind"], "pre": e["pre_val_acc"], "post": e["post_val_acc"], "delta": e["delta"],
              "preserving": e["preserving"]} for e in trend.events]
    fpt = [r for r in rows if r["preserving"]]
    pads = [r for r in rows if r["kind"].startswith("random_pad")]
    _detail(record_property, f"max FPT |delta| {max(abs(r['delta']) for r in fpt):.4f}; random pad deltas "
                             + ", ".join(f"{r['kind']} {r['delta']:+.3f}" for r in pads))
    for r in fpt:
        assert abs(r["delta"]) <= 1e-3, r
        if r["kind"].startswith("r2_"):
            assert r["delta"] == 0, r
    for r in pads:
        assert abs(r["delta"]) > 0.01, r


@pytest.mark.acceptance(10, "init-scale ablation direction")
def test_ac10_ablation(record_property):
    rows = experiments.init_scale_ablation(seeds=(0, 1, 2))
    _detail(record_property, "; ".join(f"seed {r['seed']}: {r['matched_std']:.3f} -> {r['scaled']:.3f}"
                                       for r in rows))
    assert sum(r["increased"] for r in rows) >= 2
