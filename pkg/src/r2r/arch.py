"""Network builders for the CIFAR-sized architectures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidMultiplier
from .graph import ConvLayer, LayerNode, NetworkGraph, ShortcutOp, identity_shortcut
from .nonlinear import BatchNorm, MaxPool, ReLU
from .tensor import Kernel

FAMILIES = ("ResNetCifar10", "ResNetCifar18", "SmallConv", "SmallConvWidened", "TinyResNet")


@dataclass
class ArchSpec:
    family: str = "ResNetCifar10"
    width_multiplier: float = 1.0
    residual: bool = True
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown architecture family {self.family!r}; choose from {FAMILIES}")
        self.input_shape = tuple(self.input_shape)


def he_kernel(rng, c_out, c_in, k, stride=1, padding=0, dtype=np.float32, gain=2.0):
    bound = math.sqrt(3.0 * gain / (c_in * k * k))
    return Kernel(rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(dtype), stride, padding)


def _conv(rng, c_out, c_in, k, stride, padding, sigma, dtype):
    return ConvLayer(he_kernel(rng, c_out, c_in, k, stride, padding, dtype), np.zeros(c_out, dtype), sigma)


def _head(rng, classes, c_in, dtype):
    # small init keeps the initial logits near uniform
    return ConvLayer(he_kernel(rng, classes, c_in, 1, dtype=dtype, gain=0.01), np.zeros(classes, dtype), [])


def _bn_relu(c, dtype):
    return [BatchNorm(c, dtype=dtype), ReLU()]


def channels_for(r: float, base: int) -> int:
    c = int(math.floor(base * r + 1e-9))
    if c < 1:
        raise InvalidMultiplier(f"width multiplier {r} gives floor({base}r) = {c} channels")
    return c


def _resnet(rng, spec, blocks_per_stage, stem_k, stem_pool, dtype, base=(64, 128)):
    r = spec.width_multiplier
    c1, c2 = channels_for(r, base[0]), channels_for(r, base[1])
    cin = spec.input_shape[0]
    nodes = [LayerNode("conv1", _conv(rng, c1, cin, stem_k, 2, stem_k // 2,
                                      _bn_relu(c1, dtype) + [stem_pool], dtype))]
    prev, prev_c = "conv1", c1
    for stage, c in ((2, c1), (3, c2)):
        for b in range(1, blocks_per_stage + 1):
            stride = 2 if stage == 3 and b == 1 else 1
            a_id, b_id = f"conv{stage}_{b}a", f"conv{stage}_{b}b"
            nodes.append(LayerNode(a_id, _conv(rng, c, prev_c, 3, stride, 1, _bn_relu(c, dtype), dtype)))
            sc = src = None
            if spec.residual:
                src = prev
                if stride != 1 or prev_c != c:
                    sc = ShortcutOp("projection", prev_c, c, he_kernel(rng, c, prev_c, 1, stride, 0, dtype),
                                    np.zeros(c, dtype))
                else:
                    sc = identity_shortcut(c)
            nodes.append(LayerNode(b_id, _conv(rng, c, c, 3, 1, 1, _bn_relu(c, dtype), dtype), src, sc))
            prev, prev_c = b_id, c
    return nodes, _head(rng, spec.num_classes, prev_c, dtype)


def build_arch(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> NetworkGraph:
    """Fresh network with He-uniform kernels and zero biases.

    ``TinyResNet`` is a one-block-per-stage residual net with a 3x3 stem,
    small enough to train on a CPU in seconds per epoch.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype).type
    fam = spec.family
    if fam in ("ResNetCifar10", "ResNetCifar18"):
        nodes, head = _resnet(rng, spec, 2 if fam == "ResNetCifar10" else 4, 7, MaxPool(3, 2, 1), dtype)
    elif fam == "TinyResNet":
        nodes, head = _resnet(rng, spec, 1, 3, MaxPool(2, 2), dtype)
    else:
        c = 16 if fam == "SmallConv" else 32
        c = max(1, int(math.floor(c * spec.width_multiplier + 1e-9)))
        cin, h, w = spec.input_shape
        nodes = [LayerNode("conv1", _conv(rng, c, cin, 7, 1, 3, [ReLU(), MaxPool(2, 2)], dtype))]
        nodes.append(LayerNode("fc1", _conv(rng, 150, c, h // 2, 1, 0, [ReLU()], dtype)))
        head = _head(rng, spec.num_classes, 150, dtype)
    return NetworkGraph(spec.input_shape, nodes, head,
                        meta={"family": fam, "width_multiplier": spec.width_multiplier,
                              "residual": spec.residual})


def conv_layer_count(net) -> int:
    # weighted layers, counting the classifier head the way ResNet depth is usually quoted
    return len(net.nodes) + 1
