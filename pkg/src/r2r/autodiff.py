"""Reverse-mode gradients through a network graph, optimizers and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelOutOfRange, NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .graph import INPUT, forward
from .tensor import conv2d_backward


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), labels] -= 1
    return loss, (p / n).astype(logits.dtype)


def _layer_backward(layer, cache, dy, grads, prefix, need_dx):
    for k in range(len(layer.sigma) - 1, -1, -1):
        st = layer.sigma[k]
        dy, g = st.backward(dy, cache["stages"][k])
        for name, v in g.items():
            grads[f"{prefix}.sigma{k}.{name}"] = v.astype(getattr(st, name).dtype)
    grads[f"{prefix}.b"] = dy.sum(axis=(0, 2, 3)).astype(layer.bias.dtype)
    dx, dw = conv2d_backward(layer.kernel, cache["x"], dy, need_dx=need_dx)
    grads[f"{prefix}.W"] = dw.astype(layer.kernel.weight.dtype)
    return dx


def _shortcut_backward(op, cache, dy, grads, prefix, need_dx):
    x = cache["x"]
    dx = np.zeros_like(x) if need_dx else None
    base = op.base_channels
    if op.kind == "projection":
        dbase = dy[:, :base]
        grads[f"{prefix}.sc.b"] = dbase.sum(axis=(0, 2, 3)).astype(op.bias.dtype)
        dxp, dw = conv2d_backward(op.kernel, x, dbase, need_dx=need_dx)
        grads[f"{prefix}.sc.W"] = dw.astype(op.kernel.weight.dtype)
        if need_dx:
            dx += dxp
    elif need_dx:
        dx[:, :base] += dy[:, :base]
    if need_dx:
        for t, p, m in op.folds:
            dx[:, p] += dy[:, t]
            dx[:, m] -= dy[:, t]
    return dx


def forward_backward(net, x, labels, train=True, update_stats=False):
    """Like :func:`backward` but also returns the logits: ``(loss, grads, logits)``."""
    tape = {}
    logits, _ = forward(net, x, train=train, update_stats=update_stats, tape=tape)
    loss, dlogits = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    grads = {}
    dpooled = _layer_backward(net.head, tape["head"]["layer"], dlogits[:, :, None, None],
                              grads, "head", need_dx=True)
    n, c, h, w = tape["head"]["last_shape"]
    dcur = np.broadcast_to(dpooled / dpooled.dtype.type(h * w), (n, c, h, w)).copy()
    pending = {}
    for k in range(len(net.nodes) - 1, -1, -1):
        nd = net.nodes[k]
        dy = dcur + pending.pop(nd.id) if nd.id in pending else dcur
        rec = tape[nd.id]
        if nd.shortcut is not None:
            src = nd.shortcut_source
            dsrc = _shortcut_backward(nd.shortcut, rec["shortcut"], dy, grads, nd.id, need_dx=src != INPUT)
            if dsrc is not None:
                pending[src] = pending[src] + dsrc if src in pending else dsrc
        dcur = _layer_backward(nd.layer, rec["layer"], dy, grads, nd.id, need_dx=k > 0)
    return loss, grads, logits


def backward(net, x, labels, train=True, update_stats=False):
    """Mean cross-entropy and its gradient for every trainable parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``net.parameters()``.
    """
    loss, grads, _ = forward_backward(net, x, labels, train=train, update_stats=update_stats)
    return loss, grads


def loss_value(net, x, labels, train=True) -> float:
    logits, _ = forward(net, x, train=train)
    return cross_entropy(logits, labels)[0]


def central_difference(f, w: float, step: float = 1e-5) -> float:
    return (f(w + step) - f(w - step)) / (2 * step)


def finite_diff_grad(net, x, labels, param_index, step=1e-5, train=True) -> float:
    """Central-difference derivative of the loss w.r.t. one parameter entry.

    ``param_index`` is ``(key, flat_index)``.  The parameter is restored
    afterwards.  Intended for 64-bit networks.
    """
    key, idx = param_index
    arr = net.parameters()[key]
    flat = arr.reshape(-1)
    orig = flat[idx].copy()

    def f(v):
        flat[idx] = v
        return loss_value(net, x, labels, train=train)

    try:
        return central_difference(f, float(orig), step)
    finally:
        flat[idx] = orig


@dataclass
class Optimizer:
    """SGD with momentum or Adam; weight decay is added to the gradient."""

    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def reset(self):
        self.state.clear()

    def step(self, net, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        params = net.parameters()
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"gradient for {key} is not finite")
        for key, g in grads.items():
            p = params[key]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
            g = g.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p
            st = self.state.get(key)
            if st is None or st["m"].shape != p.shape:
                st = self.state[key] = {"m": np.zeros(p.shape), "v": np.zeros(p.shape), "t": 0}
            if self.kind == "sgd":
                if self.momentum:
                    st["m"] = self.momentum * st["m"] + g
                    upd = st["m"]
                else:
                    upd = g
                p -= (lr * upd).astype(p.dtype)
            else:
                st["t"] += 1
                t = st["t"]
                st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
                st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
                mhat = st["m"] / (1 - self.beta1 ** t)
                vhat = st["v"] / (1 - self.beta2 ** t)
                p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def optimizer_step(state: Optimizer, net, grads: dict, lr: float | None = None):
    state.step(net, grads, lr)
    return net, state


def lr_schedule(epoch: int, base_lr: float, drops=()) -> float:
    lr = base_lr
    for at, factor in drops:
        if epoch >= at:
            lr *= factor
    return lr
