"""Randomised function-preservation checks used by ``r2r verify`` and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph import INPUT, ConvLayer, LayerNode, NetworkGraph, ShortcutOp, forward, identity_shortcut
from .morph import (DeepenSpec, InitSpec, WidenSpec, net2deeper, net2wider, netmorph_wider, r2_deeper, r2_wider,
                    zero_init_block)
from .nonlinear import AvgPool, BatchNorm, MaxPool, ReLU, Sigmoid
from .tensor import Kernel

TOLERANCE = {np.float32: 1e-5, np.float64: 1e-10}
EXACT_KINDS = ("r2_wider", "r2_deeper")
RESIDUAL_FREE_KINDS = ("net2wider", "net2deeper")


def _rand_bn(rng, c, dtype):
    return BatchNorm(gamma=rng.uniform(0.5, 1.5, c).astype(dtype), beta=rng.normal(0, 0.2, c).astype(dtype),
                     running_mean=rng.normal(0, 0.2, c).astype(dtype),
                     running_var=rng.uniform(0.5, 2.0, c).astype(dtype))


def _rand_pipeline(rng, c, h, dtype):
    stages = []
    if rng.random() < 0.6:
        stages.append(_rand_bn(rng, c, dtype))
    if rng.random() < 0.8:
        stages.append(ReLU())
    if h >= 4 and rng.random() < 0.15:
        stages.append(MaxPool(2, 2) if rng.random() < 0.5 else AvgPool(2, 2))
    return stages


def random_network(rng, dtype=np.float64, residual=True, layers=None, input_shape=(3, 8, 8), classes=5,
                   max_channels=16):
    """A random chain of 2-6 conv layers with 2-16 channels and mixed pipelines.

    With ``residual`` set, nodes may take identity, zero-pad or projection
    shortcuts from earlier volumes of the same or a larger spatial size.
    """
    n_layers = int(rng.integers(2, 7)) if layers is None else layers
    shapes = {INPUT: tuple(input_shape)}
    order = [INPUT]
    nodes = []
    c, h, w = input_shape
    for k in range(n_layers):
        co = int(rng.integers(2, max_channels + 1))
        ks = int(rng.choice([1, 3]))
        stride = 2 if h >= 4 and rng.random() < 0.2 else 1
        kern = Kernel(rng.normal(0, 1 / np.sqrt(c * ks * ks), (co, c, ks, ks)).astype(dtype), stride, ks // 2)
        layer = ConvLayer(kern, rng.normal(0, 0.1, co).astype(dtype), [])
        ho, wo = kern.output_hw(h, w)
        layer.sigma = _rand_pipeline(rng, co, ho, dtype)
        ho, wo = layer.out_hw(h, w)
        nid = f"n{k}"
        src = op = None
        if residual and k >= 1 and rng.random() < 0.6:
            src = order[int(rng.integers(0, len(order)))]
            sc, sh, sw = shapes[src]
            s = next((s for s in range(1, 5) if (sh - 1) // s + 1 == ho and (sw - 1) // s + 1 == wo), None)
            if s is None:
                src = None
            elif s == 1 and sc == co and rng.random() < 0.6:
                op = identity_shortcut(co)
            elif s == 1 and sc < co and rng.random() < 0.5:
                op = ShortcutOp("zeropad", sc, co)
            else:
                op = ShortcutOp("projection", sc, co, Kernel(rng.normal(0, 0.5, (co, sc, 1, 1)).astype(dtype), s, 0),
                                rng.normal(0, 0.1, co).astype(dtype))
        nodes.append(LayerNode(nid, layer, src, op))
        shapes[nid] = (co, ho, wo)
        order.append(nid)
        c, h, w = co, ho, wo
    head = ConvLayer(Kernel(rng.normal(0, 1 / np.sqrt(c), (classes, c, 1, 1)).astype(dtype)),
                     np.zeros(classes, dtype), [])
    return NetworkGraph(input_shape, nodes, head)


def _outputs(net, x):
    return [forward(net, x, train=t)[0] for t in (False, True)]


def max_deviation(a, b) -> float:
    return max(float(np.max(np.abs(p - q))) for p, q in zip(a, b))


def apply_random_fpt(kind, net, rng, dtype):
    ids = [nd.id for nd in net.nodes]
    target = ids[int(rng.integers(0, len(ids)))]
    init = InitSpec(str(rng.choice(["matched_std", "he", "scaled_matched_std"])), int(rng.integers(1 << 31)),
                    multiplier=float(rng.uniform(0.5, 3)))
    if kind == "r2_wider":
        return r2_wider(net, WidenSpec(target, 2 * int(rng.integers(1, 4)), init))
    if kind == "r2_deeper":
        final = str(rng.choice(["identity", "relu"]))
        return r2_deeper(net, DeepenSpec(target, 2 * int(rng.integers(1, 5)), int(rng.choice([1, 3])), init, final))
    if kind == "net2wider":
        return net2wider(net, target, net.node(target).layer.c_out + int(rng.integers(1, 6)),
                         seed=int(rng.integers(1 << 31)))
    if kind == "net2deeper":
        return net2deeper(net, target)
    if kind == "netmorph_wider":
        return netmorph_wider(net, target, int(rng.integers(1, 5)), str(rng.choice(["in", "out"])), init)
    raise ValueError(kind)


@dataclass
class SuiteResult:
    name: str
    dtype: str
    trials: int
    max_dev: float
    tolerance: float
    passed: bool
    seconds: float
    note: str = ""


def preservation_suite(kind, dtype=np.float64, trials=50, batch=16, seed=0) -> SuiteResult:
    """Apply ``kind`` to ``trials`` random networks and compare outputs on a random batch.

    Both eval-mode and train-mode (batch statistics) outputs are compared.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, hash(kind) % (1 << 31), np.dtype(dtype).itemsize])
    worst, preserved = 0.0, True
    for _ in range(trials):
        net = random_network(rng, dtype, residual=kind not in RESIDUAL_FREE_KINDS)
        x = rng.normal(0, 1, (batch,) + net.input_shape).astype(dtype)
        before = _outputs(net, x)
        rep = apply_random_fpt(kind, net, rng, dtype)
        worst = max(worst, max_deviation(before, _outputs(net, x)))
        if kind != "net2wider":
            preserved &= rep.parameters_preserved
    tol = 0.0 if kind in EXACT_KINDS else TOLERANCE[np.dtype(dtype).type]
    ok = worst <= tol and preserved
    return SuiteResult(kind, np.dtype(dtype).name, trials, worst, tol, ok, time.perf_counter() - t0,
                       "" if preserved else "existing parameters modified")


def zero_block_suite(trials=100, seed=0) -> SuiteResult:
    """Zero-initialised blocks give exact zeros for every init scheme; sigmoid is rejected."""
    from .errors import InvalidFinalSigma

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    schemes = ["matched_std", "he", "zeros", "scaled_matched_std"]
    for i in range(trials):
        dtype = np.float32 if i % 2 else np.float64
        c = int(rng.integers(1, 9))
        spec = DeepenSpec("n", 2 * int(rng.integers(1, 5)), int(rng.choice([1, 3, 5])),
                          InitSpec(schemes[i % 4], i, multiplier=10.0), str(rng.choice(["identity", "relu"])))
        ctx = rng.normal(0, 1, (4, c, 3, 3)).astype(dtype)
        a, b = zero_init_block(spec, c, dtype, ctx)
        from .graph import layer_forward
        x = rng.normal(0, 3, (4, c, 6, 6)).astype(dtype)
        for train in (False, True):
            y = layer_forward(b, layer_forward(a, x, train=train), train=train)
            worst = max(worst, float(np.max(np.abs(y))))
    try:
        zero_init_block(DeepenSpec("n", 2, 3, InitSpec("he"), [Sigmoid()]), 2, np.float64)
        rejected = False
    except InvalidFinalSigma:
        rejected = True
    ok = worst == 0.0 and rejected
    return SuiteResult("zero_init_block", "both", trials, worst, 0.0, ok, time.perf_counter() - t0,
                       "" if rejected else "sigmoid accepted")


def residual_recursion_suite(dtype=np.float64, trials=10, seed=0) -> SuiteResult:
    """Widen a source twice where it feeds both an identity and a projection shortcut."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, np.dtype(dtype).itemsize])
    worst = 0.0
    for t in range(trials):
        net = recursion_network(rng, dtype)
        x = rng.normal(0, 1, (16,) + net.input_shape).astype(dtype)
        before = _outputs(net, x)
        for j in range(2):
            r2_wider(net, WidenSpec("n0", 2 * int(rng.integers(1, 4)), InitSpec(seed=100 * t + j)))
        worst = max(worst, max_deviation(before, _outputs(net, x)))
    return SuiteResult("residual_recursion", np.dtype(dtype).name, trials, worst, 0.0, worst == 0.0,
                       time.perf_counter() - t0)


def recursion_network(rng, dtype=np.float64):
    """``n0`` feeds ``n1``, an identity shortcut into ``n2`` and a strided projection into ``n3``."""
    c = int(rng.integers(2, 9))
    d = int(rng.integers(2, 9))

    def conv(co, ci, stride=1):
        k = Kernel(rng.normal(0, 1 / np.sqrt(ci * 9), (co, ci, 3, 3)).astype(dtype), stride, 1)
        return ConvLayer(k, rng.normal(0, 0.1, co).astype(dtype), [_rand_bn(rng, co, dtype), ReLU()])

    nodes = [LayerNode("n0", conv(c, 3)), LayerNode("n1", conv(c, c)),
             LayerNode("n2", conv(c, c), "n0", identity_shortcut(c)),
             LayerNode("n3", conv(d, c, 2), "n0",
                       ShortcutOp("projection", c, d, Kernel(rng.normal(0, 0.5, (d, c, 1, 1)).astype(dtype), 2),
                                  rng.normal(0, 0.1, d).astype(dtype)))]
    head = ConvLayer(Kernel(rng.normal(0, 0.5, (4, d, 1, 1)).astype(dtype)), np.zeros(4, dtype), [])
    return NetworkGraph((3, 8, 8), nodes, head)


def run_all(trials=50, seed=0, dtypes=(np.float32, np.float64)) -> list:
    results = []
    for kind in ("r2_wider", "r2_deeper", "net2wider", "net2deeper", "netmorph_wider"):
        for dt in dtypes:
            results.append(preservation_suite(kind, dt, trials, seed=seed))
    results.append(zero_block_suite(seed=seed))
    for dt in dtypes:
        results.append(residual_recursion_suite(dt, seed=seed))
    return results


def format_table(results) -> str:
    lines = [f"{'suite':<20} {'dtype':<8} {'trials':>6} {'max dev':>11} {'tol':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<20} {r.dtype:<8} {r.trials:>6} {r.max_dev:>11.3g} {r.tolerance:>9.3g}  "
                     f"{'PASS' if r.passed else 'FAIL'}{'  ' + r.note if r.note else ''}")
    return "\n".join(lines)


def gradient_check(net, x, labels, entries_per_param=4, step=1e-5, floor=1e-6, rng=None):
    """Largest relative error between backprop and central differences.

    Entries whose finite difference changes when the step shrinks tenfold sit
    on a kink (ReLU at 0, pooling ties) and are skipped.  The denominator has
    an absolute ``floor`` so exactly-zero gradients are not divided by noise.
    Returns ``(max_rel_err, checked, skipped)``.
    """
    from .autodiff import backward, finite_diff_grad

    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = backward(net, x, labels, train=True)
    worst, checked, skipped = 0.0, 0, 0
    for key in sorted(grads):
        g = grads[key].reshape(-1)
        for idx in rng.choice(g.size, min(entries_per_param, g.size), replace=False):
            num = finite_diff_grad(net, x, labels, (key, int(idx)), step)
            fine = finite_diff_grad(net, x, labels, (key, int(idx)), step / 10)
            if abs(num - fine) > 1e-5 * max(abs(num), floor * 10):
                skipped += 1
                continue
            rel = abs(num - g[idx]) / max(abs(num), abs(g[idx]), floor)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def gradient_suite(nets=10, seed=0) -> SuiteResult:
    """Backprop against finite differences on small random 64-bit networks."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 77])
    worst, total, skipped = 0.0, 0, 0
    for _ in range(nets):
        net = random_network(rng, np.float64, layers=int(rng.integers(2, 5)), input_shape=(3, 6, 6), classes=4,
                             max_channels=8)
        x = rng.normal(0, 1, (4,) + net.input_shape)
        y = rng.integers(0, 4, 4)
        w, c, s = gradient_check(net, x, y, rng=rng)
        worst, total, skipped = max(worst, w), total + c, skipped + s
    return SuiteResult("gradient_check", "float64", nets, float(worst), 1e-4, bool(worst <= 1e-4), time.perf_counter() - t0,
                       f"{total} entries checked, {skipped} on kinks skipped")
