"""FLOP accounting, per-epoch metric records with CSV output, and filter image export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import INPUT

CSV_HEADER = ["epoch", "examples", "flops", "train_loss", "train_acc", "val_acc", "wall_s", "event"]
BACKWARD_FACTOR = 2


@dataclass
class FlopCount:
    forward_flops_per_example: int
    train_step_flops_per_example: int
    layers: dict = field(default_factory=dict)


def conv_flops(kernel, ho, wo) -> int:
    return 2 * kernel.c_out * kernel.c_in * kernel.kh * kernel.kw * ho * wo


def _layer_flops(layer, c_in_hw):
    _, h, w = c_in_hw
    ho, wo = layer.kernel.output_hw(h, w)
    total = conv_flops(layer.kernel, ho, wo) + layer.c_out * ho * wo
    c = layer.c_out
    for st in layer.sigma:
        total += st.flops(c, ho, wo)
        ho, wo = st.out_hw(ho, wo)
    return total, (c, ho, wo)


def count_flops(net, input_shape=None) -> FlopCount:
    """Per-example FLOPs of one forward pass and of one training step.

    A multiply-accumulate is 2 FLOPs; bias, every nonlinearity stage (except
    identity) and every shortcut addition cost one FLOP per output element;
    a fold costs 2 per pair per spatial position.  The head costs its pooling
    sum plus its 1x1 conv and bias; the softmax is not counted.  A training
    step is the forward pass plus a backward pass of twice its cost.
    """
    shape = tuple(input_shape) if input_shape is not None else net.input_shape
    shapes = {INPUT: shape}
    layers = {}
    prev = shape
    for nd in net.nodes:
        f, out = _layer_flops(nd.layer, prev)
        if nd.shortcut is not None:
            op = nd.shortcut
            c, ho, wo = out
            f += c * ho * wo
            if op.kind == "projection":
                f += conv_flops(op.kernel, ho, wo) + op.kernel.c_out * ho * wo
            f += 2 * len(op.folds) * ho * wo
        layers[nd.id] = f
        shapes[nd.id] = prev = out
    c, h, w = prev
    hf, _ = _layer_flops(net.head, (c, 1, 1))
    layers["head"] = c * h * w + hf
    fwd = sum(layers.values())
    return FlopCount(fwd, (1 + BACKWARD_FACTOR) * fwd, layers)


@dataclass
class MetricsRecord:
    epoch: int
    examples: int
    flops: float
    train_loss: float
    train_acc: float
    val_acc: float
    wall_s: float
    event: str = ""


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".6g")


class MetricsLog:
    """Append-only list of :class:`MetricsRecord` for one run."""

    def __init__(self):
        self.records: list[MetricsRecord] = []

    def record(self, rec: MetricsRecord):
        if self.records:
            last = self.records[-1]
            if rec.epoch < last.epoch or rec.examples < last.examples or rec.flops < last.flops:
                raise ValueError("metrics records must be appended in order with non-decreasing totals")
        self.records.append(rec)

    def emit_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_HEADER)
            for r in self.records:
                wr.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])


def record(run: MetricsLog, rec: MetricsRecord):
    run.record(rec)


def emit_csv(run: MetricsLog, path):
    run.emit_csv(path)


def read_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            out.append(MetricsRecord(int(row["epoch"]), int(row["examples"]), float(row["flops"]),
                                     float(row["train_loss"]), float(row["train_acc"]), float(row["val_acc"]),
                                     float(row["wall_s"]), row["event"]))
    return out


def _normalize(f):
    lo, hi = float(f.min()), float(f.max())
    if hi == lo:
        return np.full(f.shape, 128, np.uint8)
    return np.round((f - lo) / (hi - lo) * 255).astype(np.uint8)


def _write_pnm(path, magic, img):
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def export_filters(net, node_id, path) -> list:
    """Write each filter of ``node_id`` as 8-bit images under directory ``path``.

    Three-channel inputs give one RGB ``filter_<f>.ppm`` per filter; otherwise
    each input slice becomes ``filter_<f>_<c>.pgm``.  Each filter is min-max
    normalised over all its input channels.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    w = net.head.kernel.weight if node_id == "head" else net.node(node_id).layer.kernel.weight
    written = []
    for f in range(w.shape[0]):
        img = _normalize(np.asarray(w[f], np.float64))
        if w.shape[1] == 3:
            p = out / f"filter_{f}.ppm"
            _write_pnm(p, "P6", img.transpose(1, 2, 0))
            written.append(p)
        else:
            for c in range(w.shape[1]):
                p = out / f"filter_{f}_{c}.pgm"
                _write_pnm(p, "P5", img[c])
                written.append(p)
    return written


def read_pnm(path) -> np.ndarray:
    """Parse a binary PGM/PPM written by :func:`export_filters`; returns ``(h, w)`` or ``(h, w, 3)``."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"unsupported image header {tokens}")
    ch = 3 if magic == "P6" else 1
    img = np.frombuffer(data[pos:pos + w * h * ch], np.uint8)
    return img.reshape(h, w, 3) if ch == 3 else img.reshape(h, w)


def flops_to_reach(records, target: float, key: str = "val_acc"):
    """Cumulative training FLOPs at the first record whose ``key`` reaches ``target``."""
    for r in records:
        v = getattr(r, key)
        if not math.isnan(v) and v >= target:
            return r.flops
    return None
