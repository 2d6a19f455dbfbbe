"""Versioned JSON save/load for network graphs.

Floats are written with ``repr`` of the Python float, which round-trips
float64 exactly; float32 values widen to float64 losslessly, so both dtypes
reload bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .tensor import Kernel, Segment

FORMAT = "r2r.netgraph"
VERSION = 1


def tensor_to_dict(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "dtype": a.dtype.name, "data": [float(v) for v in a.ravel()]}


def tensor_from_dict(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).astype(d.get("dtype", "float64")).reshape(d["shape"])


def kernel_to_dict(k: Kernel) -> dict:
    return {"weight": tensor_to_dict(k.weight), "stride": k.stride, "padding": k.padding,
            "layout": [[s.width, s.paired] for s in k.layout]}


def kernel_from_dict(d: dict) -> Kernel:
    return Kernel(tensor_from_dict(d["weight"]), int(d["stride"]), int(d["padding"]),
                  tuple(Segment(int(w), bool(p)) for w, p in d["layout"]))


def stage_from_dict(d: dict):
    from .nonlinear import STAGES, BatchNorm

    d = dict(d)
    kind = d.pop("kind")
    if kind not in STAGES:
        raise MalformedFile(f"unknown stage kind {kind!r}")
    cls = STAGES[kind]
    if cls is BatchNorm:
        arrays = {k: tensor_from_dict(d.pop(k)) for k in cls.param_names + cls.buffer_names}
        return BatchNorm(**arrays, **d)
    return cls(**d)


def layer_to_dict(layer) -> dict:
    return {"kernel": kernel_to_dict(layer.kernel), "bias": tensor_to_dict(layer.bias),
            "sigma": [st.to_dict() for st in layer.sigma]}


def layer_from_dict(d: dict):
    from .graph import ConvLayer
    return ConvLayer(kernel_from_dict(d["kernel"]), tensor_from_dict(d["bias"]),
                     [stage_from_dict(s) for s in d["sigma"]])


def shortcut_to_dict(op) -> dict:
    d = {"kind": op.kind, "in_channels": op.in_channels, "out_channels": op.out_channels,
         "folds": [list(f) for f in op.folds]}
    if op.kind == "projection":
        d["kernel"] = kernel_to_dict(op.kernel)
        d["bias"] = tensor_to_dict(op.bias)
    return d


def shortcut_from_dict(d: dict):
    from .graph import ShortcutOp
    kernel = kernel_from_dict(d["kernel"]) if "kernel" in d else None
    bias = tensor_from_dict(d["bias"]) if "bias" in d else None
    return ShortcutOp(d["kind"], d["in_channels"], d["out_channels"], kernel, bias, d["folds"])


def graph_to_dict(net) -> dict:
    nodes = []
    for nd in net.nodes:
        entry = {"id": nd.id, "layer": layer_to_dict(nd.layer)}
        if nd.shortcut is not None:
            entry["shortcut_source"] = nd.shortcut_source
            entry["shortcut"] = shortcut_to_dict(nd.shortcut)
        nodes.append(entry)
    return {"format": FORMAT, "version": VERSION, "dtype": net.dtype.name,
            "input_shape": list(net.input_shape), "nodes": nodes,
            "head": layer_to_dict(net.head), "meta": net.meta}


def graph_from_dict(d: dict):
    from .graph import LayerNode, NetworkGraph

    if d.get("format") != FORMAT:
        raise MalformedFile(f"not a network file (format={d.get('format')!r})")
    if d.get("version") != VERSION:
        raise MalformedFile(f"unsupported network file version {d.get('version')!r}")
    try:
        nodes = []
        for e in d["nodes"]:
            sc = shortcut_from_dict(e["shortcut"]) if "shortcut" in e else None
            nodes.append(LayerNode(e["id"], layer_from_dict(e["layer"]), e.get("shortcut_source"), sc))
        return NetworkGraph(d["input_shape"], nodes, layer_from_dict(d["head"]), d.get("meta"))
    except (KeyError, TypeError) as e:
        raise MalformedFile(f"network file is missing data: {e}") from e


def save_graph(net, path):
    Path(path).write_text(json.dumps(graph_to_dict(net)))


def load_graph(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MalformedFile(f"{path}: {e}") from e
    return graph_from_dict(d)
