"""Layered network representation: conv layers, residual shortcuts, a head.

A network is an ordered chain of nodes.  Node ``k`` reads the output of node
``k-1`` (the first node reads the network input), applies its conv layer and
nonlinearity pipeline, and optionally adds a shortcut carried over from an
earlier volume::

    x_k = sigma_k(W_k * x_{k-1} + b_k) + r_k(x_source)

The head global-average-pools the last volume and applies a 1x1 conv, which
plays the role of the fully connected classifier.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .nonlinear import BatchNorm, Stage, pipeline_forward, pipeline_out_hw
from .tensor import Kernel, conv2d, layout_span, spatial_sum

INPUT = "input"


@dataclass
class ConvLayer:
    kernel: Kernel
    bias: np.ndarray
    sigma: list = field(default_factory=list)

    @property
    def c_out(self) -> int:
        return self.kernel.c_out

    @property
    def c_in(self) -> int:
        return self.kernel.c_in

    def out_hw(self, h, w):
        h, w = self.kernel.output_hw(h, w)
        return pipeline_out_hw(self.sigma, h, w)


def layer_forward(layer: ConvLayer, x: np.ndarray, train=False, cache=None, update_stats=False):
    """``sigma(conv2d(W, x) + b)`` with the pipeline stages applied in order."""
    single = x.ndim == 3
    xb = x[None] if single else x
    z = conv2d(layer.kernel, xb)
    z = z + layer.bias.astype(z.dtype)[None, :, None, None]
    caches = None
    if cache is not None:
        cache["x"] = xb
        caches = cache["stages"] = []
    y = pipeline_forward(layer.sigma, z, train=train, caches=caches, update_stats=update_stats)
    return y[0] if single else y


@dataclass
class ShortcutOp:
    """The map applied to a volume carried over a residual connection.

    ``identity`` and ``zeropad`` pass source channels ``[0, in_channels)``
    straight through; ``projection`` applies a strided conv plus bias.  The
    result is then zero padded up to ``out_channels``.  Each entry
    ``(target, plus, minus)`` of ``folds`` adds ``x[plus] - x[minus]`` onto
    output channel ``target``; it is how widened source channels are folded
    back into a narrower destination.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: Kernel | None = None
    bias: np.ndarray | None = None
    folds: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("identity", "zeropad", "projection"):
            raise ShapeMismatch(f"unknown shortcut kind {self.kind!r}")
        if self.kind == "projection":
            if self.kernel is None:
                raise ShapeMismatch("projection shortcut needs a kernel")
            if self.bias is None:
                self.bias = np.zeros(self.kernel.c_out, self.kernel.weight.dtype)
            self.in_channels = self.kernel.c_in
        self.folds = [tuple(int(v) for v in f) for f in self.folds]

    @property
    def base_channels(self) -> int:
        return self.kernel.c_out if self.kind == "projection" else self.in_channels

    def source_channels_needed(self) -> int:
        need = self.in_channels
        for _, p, m in self.folds:
            need = max(need, p + 1, m + 1)
        return need

    def out_hw(self, h, w):
        if self.kind == "projection":
            return self.kernel.output_hw(h, w)
        return h, w


def identity_shortcut(channels: int) -> ShortcutOp:
    return ShortcutOp("identity", channels, channels)


def shortcut_apply(op: ShortcutOp, x: np.ndarray, cache=None) -> np.ndarray:
    single = x.ndim == 3
    xb = x[None] if single else x
    n, c, h, w = xb.shape
    if op.kind == "projection":
        if c != op.kernel.c_in:
            raise ShapeMismatch(f"projection expects {op.kernel.c_in} channels, got {c}")
        base = conv2d(op.kernel, xb) + op.bias.astype(xb.dtype)[None, :, None, None]
    else:
        if c < op.source_channels_needed():
            raise ShapeMismatch(f"shortcut reads {op.source_channels_needed()} channels, source has {c}")
        base = xb[:, :op.in_channels]
    if base.shape[1] > op.out_channels:
        raise ShapeMismatch(f"shortcut base has {base.shape[1]} channels, destination {op.out_channels}")
    out = np.zeros((n, op.out_channels) + base.shape[2:], base.dtype)
    out[:, :base.shape[1]] = base
    for t, p, m in op.folds:
        out[:, t] = out[:, t] + (xb[:, p] - xb[:, m])
    if cache is not None:
        cache["x"] = xb
    return out[0] if single else out


@dataclass
class LayerNode:
    id: str
    layer: ConvLayer
    shortcut_source: str | None = None
    shortcut: ShortcutOp | None = None


class NetworkGraph:
    """Chain of :class:`LayerNode` plus a pooled 1x1-conv classifier head."""

    def __init__(self, input_shape, nodes, head: ConvLayer, meta=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.nodes: list[LayerNode] = list(nodes)
        self.head = head
        self.meta = dict(meta or {})

    @property
    def dtype(self):
        return self.head.kernel.weight.dtype

    @property
    def num_classes(self) -> int:
        return self.head.c_out

    def index(self, node_id: str) -> int:
        if node_id == INPUT:
            return -1
        for k, nd in enumerate(self.nodes):
            if nd.id == node_id:
                return k
        raise KeyError(f"no node named {node_id!r}")

    def node(self, node_id: str) -> LayerNode:
        return self.nodes[self.index(node_id)]

    def __contains__(self, node_id):
        return node_id == INPUT or any(nd.id == node_id for nd in self.nodes)

    def fresh_id(self, stem: str) -> str:
        k = 0
        while f"{stem}{k}" in self:
            k += 1
        return f"{stem}{k}"

    def output_channels(self, node_id: str) -> int:
        if node_id == INPUT:
            return self.input_shape[0]
        return self.node(node_id).layer.c_out

    def input_of(self, k: int) -> str:
        return self.nodes[k - 1].id if k > 0 else INPUT

    def consumers(self, node_id: str) -> list[tuple[str, str]]:
        """Everything reading ``node_id``'s output, as ``(kind, reader)`` pairs.

        ``kind`` is ``"conv"`` (reader is the next node id or ``"head"``) or
        ``"shortcut"`` (reader is the destination node id).
        """
        k = self.index(node_id)
        out = []
        nxt = k + 1
        out.append(("conv", self.nodes[nxt].id if nxt < len(self.nodes) else "head"))
        for nd in self.nodes:
            if nd.shortcut is not None and nd.shortcut_source == node_id:
                out.append(("shortcut", nd.id))
        return out

    def consumer_index(self) -> dict:
        return {nid: self.consumers(nid) for nid in [INPUT] + [nd.id for nd in self.nodes]}

    def shapes(self) -> dict:
        """Output ``(C, h, w)`` of every node, keyed by id (``"input"`` included)."""
        shapes = {INPUT: self.input_shape}
        prev = self.input_shape
        for nd in self.nodes:
            h, w = nd.layer.out_hw(prev[1], prev[2])
            prev = (nd.layer.c_out, h, w)
            shapes[nd.id] = prev
        return shapes

    def parameters(self) -> dict:
        """Trainable arrays keyed by stable dotted names (live references)."""
        params = {}
        for nd in self.nodes:
            _layer_params(params, nd.id, nd.layer)
            if nd.shortcut is not None and nd.shortcut.kind == "projection":
                params[f"{nd.id}.sc.W"] = nd.shortcut.kernel.weight
                params[f"{nd.id}.sc.b"] = nd.shortcut.bias
        _layer_params(params, "head", self.head)
        return params

    def set_parameter(self, key: str, value: np.ndarray):
        """Replace the array behind ``key`` (used when a transform reshapes it)."""
        owner, attr = self._locate(key)
        if isinstance(owner, Kernel):
            owner.weight = value
        else:
            setattr(owner, attr, value)

    def _locate(self, key):
        parts = key.split(".")
        nid, rest = ".".join(parts[:-1]), parts[-1]
        if nid.endswith(".sc"):
            op = self.node(nid[:-3]).shortcut
            return (op.kernel, "weight") if rest == "W" else (op, "bias")
        stage = None
        if ".sigma" in nid:
            nid, st = nid.rsplit(".sigma", 1)
            stage = int(st)
        layer = self.head if nid == "head" else self.node(nid).layer
        if stage is not None:
            return layer.sigma[stage], rest
        return (layer.kernel, "weight") if rest == "W" else (layer, "bias")

    def buffers(self) -> dict:
        bufs = {}
        for nid, layer in [(nd.id, nd.layer) for nd in self.nodes] + [("head", self.head)]:
            for k, st in enumerate(layer.sigma):
                for name, arr in st.buffers().items():
                    bufs[f"{nid}.sigma{k}.{name}"] = arr
        return bufs

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    def summary(self) -> str:
        shapes = self.shapes()
        lines = [f"input {self.input_shape}"]
        for nd in self.nodes:
            k = nd.layer.kernel
            sc = ""
            if nd.shortcut is not None:
                sc = f"  + {nd.shortcut.kind}({nd.shortcut_source})"
                if nd.shortcut.folds:
                    sc += f" folds={len(nd.shortcut.folds)}"
            stages = ",".join(s.kind for s in nd.layer.sigma) or "-"
            lines.append(f"{nd.id:>14}: {k.kh}x{k.kw}/{k.stride} {k.c_in:>3}->{k.c_out:<3} [{stages}] "
                         f"-> {shapes[nd.id]}{sc}")
        lines.append(f"{'head':>14}: avgpool, 1x1 {self.head.c_in}->{self.head.c_out}")
        return "\n".join(lines)


def _layer_params(params, nid, layer):
    params[f"{nid}.W"] = layer.kernel.weight
    params[f"{nid}.b"] = layer.bias
    for k, st in enumerate(layer.sigma):
        for name, arr in st.params().items():
            params[f"{nid}.sigma{k}.{name}"] = arr


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    return (spatial_sum(x) / x.dtype.type(h * w))[:, :, None, None]


def forward(net: NetworkGraph, x: np.ndarray, train=False, update_stats=False, tape=None):
    """Evaluate the network on a batch; returns ``(logits, probabilities)``.

    When ``tape`` is a dict it is filled with the intermediate values needed
    by :func:`r2r.autodiff.backward`.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape} does not match network input {net.input_shape}")
    outs = {INPUT: x}
    cur = x
    for nd in net.nodes:
        lc = sc_cache = None
        if tape is not None:
            lc, sc_cache = {}, {}
            tape[nd.id] = {"layer": lc, "shortcut": sc_cache}
        y = layer_forward(nd.layer, cur, train=train, cache=lc, update_stats=update_stats)
        if nd.shortcut is not None:
            r = shortcut_apply(nd.shortcut, outs[nd.shortcut_source], cache=sc_cache)
            if r.shape != y.shape:
                raise ShapeMismatch(f"shortcut into {nd.id} gives {r.shape}, branch gives {y.shape}")
            y = y + r
        outs[nd.id] = y
        cur = y
    pooled = global_avg_pool(cur)
    hc = None
    if tape is not None:
        hc = {}
        tape["head"] = {"layer": hc, "last_shape": cur.shape}
    logits = layer_forward(net.head, pooled, train=train, cache=hc, update_stats=update_stats)
    logits = logits[:, :, 0, 0]
    return logits, softmax(logits)


def validate_graph(net: NetworkGraph) -> list[str]:
    """Every structural violation found; an empty list means the graph is valid."""
    problems = []
    ids = [nd.id for nd in net.nodes]
    if len(set(ids)) != len(ids) or INPUT in ids or "head" in ids:
        problems.append(f"node ids not unique or reserved: {ids}")
    pos = {nid: k for k, nid in enumerate(ids)}
    pos[INPUT] = -1
    prev = net.input_shape
    shapes = {INPUT: prev}
    for k, nd in enumerate(net.nodes):
        problems += _check_layer(nd.id, nd.layer, prev[0])
        try:
            h, w = nd.layer.out_hw(prev[1], prev[2])
        except ShapeMismatch as e:
            problems.append(f"{nd.id}: {e}")
            h, w = 0, 0
        if h < 1 or w < 1:
            problems.append(f"{nd.id}: degenerate output {h}x{w}")
        cur = (nd.layer.c_out, h, w)
        if (nd.shortcut is None) != (nd.shortcut_source is None):
            problems.append(f"{nd.id}: shortcut and shortcut_source must be set together")
        elif nd.shortcut is not None:
            src = nd.shortcut_source
            if src not in pos:
                problems.append(f"{nd.id}: shortcut source {src!r} does not exist")
            elif pos[src] >= k:
                problems.append(f"{nd.id}: cycle, shortcut source {src!r} does not precede destination")
            else:
                problems += _check_shortcut(nd.id, nd.shortcut, shapes[src], cur)
        shapes[nd.id] = cur
        prev = cur
    problems += _check_layer("head", net.head, prev[0])
    if net.head.kernel.kh != 1 or net.head.kernel.kw != 1:
        problems.append("head: classifier kernel must be 1x1")
    # the consumer index is derived from the producer relation; check it inverts cleanly
    for nid, readers in net.consumer_index().items():
        for kind, reader in readers:
            if kind == "shortcut" and net.node(reader).shortcut_source != nid:
                problems.append(f"consumer index: {reader} listed under {nid} but reads elsewhere")
    return problems


def _check_layer(name, layer, c_in):
    problems = []
    k = layer.kernel
    if k.c_in != c_in:
        problems.append(f"{name}: kernel expects {k.c_in} input channels, receives {c_in}")
    if layout_span(k.layout) != k.c_in:
        problems.append(f"{name}: kernel layout does not cover its input channels")
    if layer.bias.shape != (k.c_out,):
        problems.append(f"{name}: bias length {layer.bias.shape} != {k.c_out} output channels")
    for j, st in enumerate(layer.sigma):
        if not isinstance(st, Stage):
            problems.append(f"{name}: sigma[{j}] is not a stage")
        elif st.channels is not None and st.channels != k.c_out:
            problems.append(f"{name}: sigma[{j}] has {st.channels} channels, layer has {k.c_out}")
        if isinstance(st, BatchNorm):
            for pname, arr in {**st.params(), **st.buffers()}.items():
                if arr.shape != (k.c_out,):
                    problems.append(f"{name}: sigma[{j}].{pname} has shape {arr.shape}")
    return problems


def _check_shortcut(name, op, src_shape, dst_shape):
    problems = []
    c, h, w = src_shape
    if op.out_channels != dst_shape[0]:
        problems.append(f"{name}: shortcut gives {op.out_channels} channels, destination has {dst_shape[0]}")
    if op.kind == "projection":
        if op.kernel.c_in != c:
            problems.append(f"{name}: projection expects {op.kernel.c_in} channels, source has {c}")
        if op.bias.shape != (op.kernel.c_out,):
            problems.append(f"{name}: projection bias length mismatch")
    elif op.source_channels_needed() > c:
        problems.append(f"{name}: shortcut reads {op.source_channels_needed()} channels, source has {c}")
    if op.base_channels > op.out_channels:
        problems.append(f"{name}: shortcut base wider than destination")
    oh, ow = op.out_hw(h, w)
    if (oh, ow) != tuple(dst_shape[1:]):
        problems.append(f"{name}: shortcut spatial {oh}x{ow} != destination {dst_shape[1]}x{dst_shape[2]}")
    for t, p, m in op.folds:
        if not 0 <= t < op.out_channels:
            problems.append(f"{name}: fold target {t} out of range")
        if p == m:
            problems.append(f"{name}: fold pair ({p}, {m}) is degenerate")
    return problems
