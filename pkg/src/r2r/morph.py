"""Function-preserving widening and deepening transforms, plus random-padding baselines.

Every transform mutates the graph in place and returns a :class:`MorphReport`.
The paired transforms (``r2_wider``, ``r2_deeper``) introduce new channels in
groups ``(L, R)`` with ``x_L == x_R`` and read them through kernels ``(U, -U)``
laid out as a paired input segment, so their contribution cancels exactly.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (EmptyContext, InvalidFinalSigma, NoInsertionPoint, NonIdempotentActivation,
                     OddChannelCount, ShapeMismatch, UnadaptableConsumer, UnsupportedShortcutKind,
                     WidthNotIncreased)
from .graph import INPUT, ConvLayer, LayerNode, identity_shortcut
from .nonlinear import (AvgPool, BatchNorm, Identity, MaxPool, ReLU, Sigmoid, Tanh, make_pipeline,
                        maps_zero_to_zero)
from .tensor import Kernel, Segment, kernel_hstack_pair, tensor_stats

_SCHEMES = {"matchedstd": "matched_std", "he": "he", "zeros": "zeros", "zero": "zeros",
            "scaledmatchedstd": "scaled_matched_std"}


@dataclass
class InitSpec:
    """How new parameters are drawn.

    ``matched_std`` samples ``U(-s/sqrt(3), s/sqrt(3))`` where ``s`` is the
    standard deviation of a context kernel; ``scaled_matched_std`` multiplies
    ``s`` by ``multiplier`` first.  ``bias`` is the constant given to new biases.
    """

    scheme: str = "matched_std"
    seed: int = 0
    multiplier: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        key = str(self.scheme).lower().replace("_", "").replace("-", "")
        if key not in _SCHEMES:
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        self.scheme = _SCHEMES[key]
        if not self.multiplier > 0:
            raise ValueError("init multiplier must be positive")

    def rng(self):
        return np.random.default_rng(self.seed)


@dataclass
class WidenSpec:
    target_node: str
    extra_channels: int
    init: InitSpec = field(default_factory=InitSpec)


@dataclass
class DeepenSpec:
    insert_after: str
    block_channels: int | None = None
    kernel_size: int = 3
    init: InitSpec = field(default_factory=InitSpec)
    final_sigma: object = "identity"
    hidden_sigma: object = ("batchnorm", "relu")


@dataclass
class MorphReport:
    kind: str
    nodes: list
    params_before: int
    params_after: int
    checksum_before: str
    checksum_after: str
    extras: dict = field(default_factory=dict)

    @property
    def parameters_preserved(self) -> bool:
        return self.checksum_before == self.checksum_after

    def to_dict(self):
        d = asdict(self)
        d["parameters_preserved"] = self.parameters_preserved
        return d


def sample_init(shape, spec: InitSpec, context=None, rng=None, dtype=None) -> np.ndarray:
    """Draw a tensor of ``shape`` according to ``spec``.

    ``context`` is the existing tensor whose spread the matched schemes copy.
    """
    rng = spec.rng() if rng is None else rng
    if dtype is None:
        dtype = context.dtype if context is not None else np.float32
    shape = tuple(int(v) for v in shape)
    if spec.scheme == "zeros":
        return np.zeros(shape, dtype)
    if spec.scheme == "he":
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / max(fan_in, 1))
    else:
        if context is None or np.size(context) == 0:
            raise EmptyContext("matched-std initialization needs a non-empty context tensor")
        s = tensor_stats(context)[1]
        if spec.scheme == "scaled_matched_std":
            s *= spec.multiplier
        bound = s / np.sqrt(3.0)
    if bound == 0:
        return np.zeros(shape, dtype)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def parameter_checksum(arrays: dict, shapes: dict) -> str:
    """sha256 over the leading ``shapes[k]`` slice of each array, in key order."""
    h = hashlib.sha256()
    for k in sorted(shapes):
        h.update(k.encode())
        a = arrays.get(k)
        if a is None:
            h.update(b"<missing>")
            continue
        sl = a[tuple(slice(0, n) for n in shapes[k])]
        h.update(str(sl.shape).encode())
        h.update(np.ascontiguousarray(sl).tobytes())
    return h.hexdigest()


def _snapshot(net):
    return {k: v.copy() for k, v in net.parameters().items()}


def _report(kind, net, before, nodes, **extras):
    shapes = {k: v.shape for k, v in before.items()}
    return MorphReport(kind, list(nodes), sum(v.size for v in before.values()), net.num_parameters(),
                       parameter_checksum(before, shapes), parameter_checksum(net.parameters(), shapes),
                       extras)


def _target(net, node_id):
    if node_id == INPUT or node_id not in net:
        raise KeyError(f"no node named {node_id!r}")
    k = net.index(node_id)
    return k, net.nodes[k]


def _conv_consumer(net, k):
    return net.nodes[k + 1].layer if k + 1 < len(net.nodes) else net.head


def _shortcut_readers(net, node_id):
    return [nd for nd in net.nodes if nd.shortcut is not None and nd.shortcut_source == node_id]


def _append_rows(layer: ConvLayer, rows, bias, bn_source=None):
    k = layer.kernel
    layer.kernel = Kernel(np.concatenate([k.weight, rows.astype(k.weight.dtype)]), k.stride, k.padding, k.layout)
    layer.bias = np.concatenate([layer.bias, bias.astype(layer.bias.dtype)])
    for st in layer.sigma:
        st.extend_channels(rows.shape[0], source=bn_source)


def _append_plain_columns(kernel: Kernel, cols) -> Kernel:
    return Kernel(np.concatenate([kernel.weight, cols.astype(kernel.weight.dtype)], axis=1),
                  kernel.stride, kernel.padding, kernel.layout + (Segment(cols.shape[1]),))


def _col_shape(kernel, e):
    return (kernel.c_out, e, kernel.kh, kernel.kw)


def adapt_residual_for_widen(shortcut, source_channels: int, e: int, init: InitSpec | None = None,
                             rng=None, paired: bool = True):
    """Return a copy of ``shortcut`` that reads a source widened by ``2e`` paired channels.

    ``source_channels`` is the source width before widening.  Identity and
    zero-pad shortcuts gain ``e`` folds ``out[j] += x_L[j] - x_R[j]``;
    projections gain a paired input block ``(V_L, -V_L)``.  With
    ``paired=False`` the projection block is two independent random halves.
    """
    op = copy.deepcopy(shortcut)
    init = init or InitSpec()
    rng = init.rng() if rng is None else rng
    if op.kind in ("identity", "zeropad"):
        op.folds = op.folds + [(j % op.out_channels, source_channels + j, source_channels + e + j)
                               for j in range(e)]
    elif op.kind == "projection":
        v = op.kernel.weight
        if paired:
            op.kernel = kernel_hstack_pair(op.kernel, sample_init(_col_shape(op.kernel, e), init, v, rng))
        else:
            cols = sample_init(_col_shape(op.kernel, 2 * e), init, v, rng)
            op.kernel = _append_plain_columns(op.kernel, cols)
        op.in_channels = op.kernel.c_in
    else:
        raise UnsupportedShortcutKind(f"cannot adapt a {op.kind!r} shortcut")
    return op


def _widen(net, spec: WidenSpec, paired: bool, kind: str):
    k, nd = _target(net, spec.target_node)
    extra = int(spec.extra_channels)
    before = _snapshot(net)
    if extra == 0 and not paired:
        return _report(kind, net, before, [])
    if extra <= 0 or extra % 2:
        raise OddChannelCount(f"paired widening needs a positive even channel increment, got {extra}")
    readers = _shortcut_readers(net, nd.id)
    for r in readers:
        if r.shortcut.kind not in ("identity", "zeropad", "projection"):
            raise UnsupportedShortcutKind(f"cannot adapt a {r.shortcut.kind!r} shortcut")
    e = extra // 2
    init, rng = spec.init, spec.init.rng()
    w = nd.layer.kernel.weight
    n = nd.layer.c_out
    row_shape = (e,) + w.shape[1:]
    if paired:
        u = sample_init(row_shape, init, w, rng)
        rows = np.concatenate([u, u])
    else:
        rows = np.concatenate([sample_init(row_shape, init, w, rng), sample_init(row_shape, init, w, rng)])
    _append_rows(nd.layer, rows, np.full(extra, init.bias))
    cons = _conv_consumer(net, k)
    if paired:
        cons.kernel = kernel_hstack_pair(cons.kernel, sample_init(_col_shape(cons.kernel, e), init,
                                                                  cons.kernel.weight, rng))
    else:
        cons.kernel = _append_plain_columns(cons.kernel, sample_init(_col_shape(cons.kernel, extra), init,
                                                                     cons.kernel.weight, rng))
    touched = [nd.id, net.nodes[k + 1].id if k + 1 < len(net.nodes) else "head"]
    for r in readers:
        r.shortcut = adapt_residual_for_widen(r.shortcut, n, e, init, rng, paired=paired)
        touched.append(r.id)
    if nd.shortcut is not None:
        nd.shortcut.out_channels += extra
    return _report(kind, net, before, touched, old_width=n, new_width=n + extra, seed=init.seed)


def r2_wider(net, spec: WidenSpec) -> MorphReport:
    """Add ``spec.extra_channels`` (= 2E) channels to a node, preserving the network function."""
    return _widen(net, spec, True, "r2_wider")


def random_pad_widen(net, spec: WidenSpec) -> MorphReport:
    """Same surgery as :func:`r2_wider` with every new parameter drawn independently."""
    return _widen(net, spec, False, "random_pad_widen")


def _block_ids(net, after):
    k = 0
    while f"{after}_z{k}a" in net or f"{after}_z{k}b" in net:
        k += 1
    return f"{after}_z{k}a", f"{after}_z{k}b"


def _block_width(spec, channels):
    bc = spec.block_channels if spec.block_channels is not None else channels + channels % 2
    if bc <= 0 or bc % 2:
        raise OddChannelCount(f"block channel count must be positive and even, got {bc}")
    if spec.kernel_size < 1 or spec.kernel_size % 2 == 0:
        raise ShapeMismatch("deepening blocks need an odd kernel size to keep the spatial shape")
    return bc


def zero_init_block(spec: DeepenSpec, channels: int, dtype=np.float32, context=None, rng=None):
    """Two conv layers whose composition outputs exact zeros for any input.

    The first layer duplicates ``U1`` into ``(U1, U1)``; the second reads the
    result through the paired block ``(U2, -U2)`` and has zero bias.
    """
    bc = _block_width(spec, channels)
    final = make_pipeline(spec.final_sigma, channels, dtype)
    if not maps_zero_to_zero(final, channels, dtype):
        raise InvalidFinalSigma("the final nonlinearity of a zero-initialised block must map 0 to 0")
    rng = spec.init.rng() if rng is None else rng
    e, ks = bc // 2, spec.kernel_size
    u1 = sample_init((e, channels, ks, ks), spec.init, context, rng, dtype)
    c1 = np.full(e, spec.init.bias, dtype)
    first = ConvLayer(Kernel(np.concatenate([u1, u1]), 1, ks // 2), np.concatenate([c1, c1]),
                      make_pipeline(spec.hidden_sigma, bc, dtype))
    u2 = sample_init((channels, e, ks, ks), spec.init, context, rng, dtype)
    second = ConvLayer(kernel_hstack_pair(None, u2, stride=1, padding=ks // 2), np.zeros(channels, dtype), final)
    return first, second


def _random_block(spec: DeepenSpec, channels, dtype, context, rng):
    bc = _block_width(spec, channels)
    ks = spec.kernel_size
    final = make_pipeline(spec.final_sigma, channels, dtype)
    w1 = sample_init((bc, channels, ks, ks), spec.init, context, rng, dtype)
    w2 = sample_init((channels, bc, ks, ks), spec.init, context, rng, dtype)
    first = ConvLayer(Kernel(w1, 1, ks // 2), np.zeros(bc, dtype), make_pipeline(spec.hidden_sigma, bc, dtype))
    second = ConvLayer(Kernel(w2, 1, ks // 2), np.zeros(channels, dtype), final)
    return first, second


def _deepen(net, spec: DeepenSpec, paired: bool, kind: str):
    if not net.nodes or spec.insert_after == INPUT or spec.insert_after not in net:
        raise NoInsertionPoint(f"cannot insert a block after {spec.insert_after!r}")
    before = _snapshot(net)
    k = net.index(spec.insert_after)
    nd = net.nodes[k]
    c, h, w = net.shapes()[nd.id]
    ctx = nd.layer.kernel.weight
    make = zero_init_block if paired else _random_block
    first, second = make(spec, c, ctx.dtype, ctx, spec.init.rng())
    if first.out_hw(h, w) != (h, w) or second.out_hw(h, w) != (h, w):
        raise ShapeMismatch("the inserted block must preserve the spatial shape")
    ida, idb = _block_ids(net, nd.id)
    for later in net.nodes[k + 1:]:
        if later.shortcut_source == nd.id:
            later.shortcut_source = idb
    net.nodes[k + 1:k + 1] = [LayerNode(ida, first), LayerNode(idb, second, nd.id, identity_shortcut(c))]
    return _report(kind, net, before, [ida, idb], insert_after=nd.id, block_channels=first.c_out,
                   seed=spec.init.seed)


def r2_deeper(net, spec: DeepenSpec) -> MorphReport:
    """Insert a zero-output residual block after ``spec.insert_after``."""
    return _deepen(net, spec, True, "r2_deeper")


def random_pad_deepen(net, spec: DeepenSpec) -> MorphReport:
    """Insert a residual block of the same shape as :func:`r2_deeper` but with unpaired random weights."""
    return _deepen(net, spec, False, "random_pad_deepen")


def net2wider(net, target_node: str, new_width: int, noise_std: float = 0.0, seed: int = 0,
              mapping=None) -> MorphReport:
    """Widen by replicating existing units and splitting their outgoing weights."""
    k, nd = _target(net, target_node)
    n, q = nd.layer.c_out, int(new_width)
    if q <= n:
        raise WidthNotIncreased(f"new width {q} must exceed current width {n}")
    if nd.shortcut is not None or _shortcut_readers(net, nd.id):
        raise UnadaptableConsumer(f"{nd.id} takes part in a residual connection; replication cannot absorb it")
    rng = np.random.default_rng(seed)
    if mapping is None:
        g = np.concatenate([np.arange(n), rng.integers(0, n, q - n)])
    else:
        g = np.asarray(mapping, dtype=np.int64)
        if g.shape != (q,) or np.any(g[:n] != np.arange(n)) or g.min() < 0 or g.max() >= n:
            raise ValueError("mapping must be the identity on the first n units and map into [0, n)")
    before = _snapshot(net)
    new = g[n:]
    w = nd.layer.kernel.weight
    rows = w[new].copy()
    if noise_std:
        rows += rng.normal(0, noise_std, rows.shape).astype(w.dtype)
    _append_rows(nd.layer, rows, nd.layer.bias[new].copy(), bn_source=new)
    cons = _conv_consumer(net, k)
    wc = cons.kernel.weight
    counts = np.bincount(g, minlength=n).astype(wc.dtype)
    scaled = wc[:, g] / counts[g][None, :, None, None]
    if noise_std:
        scaled[:, n:] += rng.normal(0, noise_std, scaled[:, n:].shape).astype(wc.dtype)
    cons.kernel = Kernel(scaled.astype(wc.dtype), cons.kernel.stride, cons.kernel.padding,
                         cons.kernel.layout + (Segment(q - n),))
    touched = [nd.id, net.nodes[k + 1].id if k + 1 < len(net.nodes) else "head"]
    return _report("net2wider", net, before, touched, mapping=g.tolist(), seed=seed, noise_std=noise_std)


def output_nonnegative(layer: ConvLayer) -> bool:
    """True when the pipeline ends in a ReLU followed only by pooling/identity stages."""
    seen = False
    for st in layer.sigma:
        if isinstance(st, ReLU):
            seen = True
        elif not isinstance(st, (MaxPool, AvgPool, Identity)):
            seen = False
    return seen


def net2deeper(net, insert_after: str) -> MorphReport:
    """Insert a 1x1 identity conv after a node whose activation is idempotent."""
    if not net.nodes or insert_after == INPUT or insert_after not in net:
        raise NoInsertionPoint(f"cannot insert a layer after {insert_after!r}")
    k = net.index(insert_after)
    nd = net.nodes[k]
    for st in nd.layer.sigma:
        if isinstance(st, (Tanh, Sigmoid)):
            raise NonIdempotentActivation(f"{nd.id} uses {st.kind}, which is not idempotent")
    before = _snapshot(net)
    c = nd.layer.c_out
    dt = nd.layer.kernel.weight.dtype
    eye = np.eye(c, dtype=dt)[:, :, None, None]
    act = [ReLU()] if nd.shortcut is None and output_nonnegative(nd.layer) else [Identity()]
    k2 = 0
    while f"{nd.id}_id{k2}" in net:
        k2 += 1
    new_id = f"{nd.id}_id{k2}"
    net.nodes.insert(k + 1, LayerNode(new_id, ConvLayer(Kernel(eye), np.zeros(c, dt), act)))
    return _report("net2deeper", net, before, [new_id], insert_after=nd.id, activation=act[0].kind)


def netmorph_wider(net, target_node: str, extra_channels: int, zero_side: str = "out",
                   init: InitSpec | None = None) -> MorphReport:
    """Add channels with one side of the new weights zero.

    ``zero_side="out"`` draws the new filters and zeros the consumer's new
    columns; ``"in"`` zeros the new filters and draws the columns, which
    preserves the function only when the node's pipeline maps 0 to 0.
    """
    init = init or InitSpec()
    if zero_side not in ("in", "out"):
        raise ValueError("zero_side must be 'in' or 'out'")
    k, nd = _target(net, target_node)
    e = int(extra_channels)
    if e < 1:
        raise ValueError("netmorph widening needs at least one new channel")
    w = nd.layer.kernel.weight
    dt = w.dtype
    if zero_side == "in":
        fresh = [BatchNorm(e, dtype=dt) if isinstance(st, BatchNorm) else st for st in nd.layer.sigma]
        if not maps_zero_to_zero(fresh, e, dt):
            raise InvalidFinalSigma(f"{nd.id}: pipeline does not map 0 to 0, zero_side='in' cannot preserve")
    before = _snapshot(net)
    rng = init.rng()
    n = nd.layer.c_out
    cons = _conv_consumer(net, k)
    if zero_side == "out":
        rows = sample_init((e,) + w.shape[1:], init, w, rng)
        cols = np.zeros(_col_shape(cons.kernel, e), dt)
    else:
        rows = np.zeros((e,) + w.shape[1:], dt)
        cols = sample_init(_col_shape(cons.kernel, e), init, cons.kernel.weight, rng)
    _append_rows(nd.layer, rows, np.zeros(e, dt))
    cons.kernel = _append_plain_columns(cons.kernel, cols)
    touched = [nd.id, net.nodes[k + 1].id if k + 1 < len(net.nodes) else "head"]
    for r in _shortcut_readers(net, nd.id):
        if r.shortcut.kind == "projection":
            r.shortcut.kernel = _append_plain_columns(r.shortcut.kernel,
                                                      np.zeros(_col_shape(r.shortcut.kernel, e), dt))
            r.shortcut.in_channels = r.shortcut.kernel.c_in
            touched.append(r.id)
    if nd.shortcut is not None:
        nd.shortcut.out_channels += e
    return _report("netmorph_wider", net, before, touched, old_width=n, new_width=n + e, zero_side=zero_side)


# planning helpers used by the runner

def widen_targets(net, factor: float = 1.5, nodes=None) -> dict:
    """New width for each conv node: ``floor(width * factor)``."""
    ids = nodes if nodes is not None else [nd.id for nd in net.nodes]
    return {nid: int(np.floor(net.node(nid).layer.c_out * factor + 1e-9)) for nid in ids}


def deepen_sites(net) -> list:
    """Last node of every maximal run of nodes with equal output shape (one per stage)."""
    shapes = net.shapes()
    sites = []
    for k, nd in enumerate(net.nodes):
        nxt = net.nodes[k + 1].id if k + 1 < len(net.nodes) else None
        if nxt is None or shapes[nxt] != shapes[nd.id]:
            sites.append(nd.id)
    return sites


FPT_KINDS = ("r2_wider", "r2_deeper", "net2wider", "net2deeper", "netmorph_wider")
BASELINE_KINDS = ("random_pad_widen", "random_pad_deepen")
WIDEN_KINDS = ("r2_wider", "random_pad_widen", "net2wider", "netmorph_wider")


def widen_all(net, kind: str, factor: float = 1.5, init: InitSpec | None = None, nodes=None,
              noise_std: float = 0.0, zero_side: str = "out") -> list:
    """Widen every listed conv node (default all) by ``factor``, in network order."""
    init = init or InitSpec()
    targets = widen_targets(net, factor, nodes)
    if kind in ("r2_wider", "random_pad_widen"):
        for nid, q in targets.items():
            inc = q - net.node(nid).layer.c_out
            if inc <= 0 or inc % 2:
                raise OddChannelCount(f"{nid}: widening {net.node(nid).layer.c_out} -> {q} is not a positive "
                                      f"even increment")
    reports = []
    for j, (nid, q) in enumerate(targets.items()):
        sub = InitSpec(init.scheme, init.seed + 1000 * j, init.multiplier, init.bias)
        extra = q - net.node(nid).layer.c_out
        if kind == "r2_wider":
            reports.append(r2_wider(net, WidenSpec(nid, extra, sub)))
        elif kind == "random_pad_widen":
            reports.append(random_pad_widen(net, WidenSpec(nid, extra, sub)))
        elif kind == "net2wider":
            reports.append(net2wider(net, nid, q, noise_std=noise_std, seed=sub.seed))
        elif kind == "netmorph_wider":
            reports.append(netmorph_wider(net, nid, extra, zero_side, sub))
        else:
            raise ValueError(f"{kind!r} is not a widening transform")
    return reports


def deepen_all(net, kind: str, repeat: int = 1, init: InitSpec | None = None, sites=None, **block) -> list:
    """Deepen once per stage (``repeat`` times), chaining repeated insertions."""
    init = init or InitSpec()
    sites = list(sites) if sites is not None else deepen_sites(net)
    reports = []
    for j, site in enumerate(sites):
        after = site
        for t in range(repeat):
            sub = InitSpec(init.scheme, init.seed + 1000 * j + t, init.multiplier, init.bias)
            if kind == "net2deeper":
                rep = net2deeper(net, after)
            else:
                spec = DeepenSpec(after, init=sub, **block)
                if kind == "r2_deeper":
                    rep = r2_deeper(net, spec)
                elif kind == "random_pad_deepen":
                    rep = random_pad_deepen(net, spec)
                else:
                    raise ValueError(f"{kind!r} is not a deepening transform")
            reports.append(rep)
            after = rep.nodes[-1]
    return reports
