"""Dense tensors, kernels and the block convolution primitives.

Arrays are plain ``numpy.ndarray`` values in float32 or float64.  The
forward convolution is written with elementwise ufuncs only, accumulating
input channels in ascending order, so that two output channels computed from
identical kernels on identical inputs are bitwise identical regardless of
where they sit in the tensor.  This exact mode is the default.  Inside
``fast_arithmetic()`` the forward pass uses a BLAS contraction instead, which
is several times quicker but gives no bitwise guarantees; training loops use
it, preservation checks do not.

A kernel also carries an *input layout*: a sequence of segments describing
how input-channel contributions are grouped before being added together.  A
plain segment sums its channels in order.  A paired segment of width ``E``
spans ``2E`` channels (a left and a right half); the two halves are summed
separately and their partial sums are added to each other before joining the
running total.  When the right half of the kernel is the negation of the left
half and the two halves of the input are equal, the pair contributes an exact
zero, which is what makes paired widening bitwise function preserving.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChannelMismatch, DegenerateOutput, ShapeMismatch

DTYPES = {"float32": np.float32, "float64": np.float64}

_exact = [True]


def exact_mode() -> bool:
    return _exact[-1]


@contextmanager
def fast_arithmetic(enabled: bool = True):
    """Use the BLAS forward convolution inside the block (exact mode when ``enabled`` is false)."""
    _exact.append(not enabled)
    try:
        yield
    finally:
        _exact.pop()


@contextmanager
def exact_arithmetic():
    with fast_arithmetic(False):
        yield


class Segment(NamedTuple):
    width: int
    paired: bool = False

    @property
    def span(self) -> int:
        return 2 * self.width if self.paired else self.width


def layout_span(layout: Sequence[Segment]) -> int:
    return sum(s.span for s in layout)


@dataclass
class Kernel:
    """A 4-D convolution kernel ``(C_out, C_in, k_h, k_w)`` with its geometry."""

    weight: np.ndarray
    stride: int = 1
    padding: int = 0
    layout: tuple = field(default=None)

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise ShapeMismatch(f"kernel must be 4-D with positive extents, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatch(f"bad stride/padding {self.stride}/{self.padding}")
        if self.layout is None:
            self.layout = (Segment(self.c_in),)
        self.layout = tuple(Segment(int(s[0]), bool(s[1])) for s in self.layout)
        if layout_span(self.layout) != self.c_in:
            raise ShapeMismatch(f"layout {self.layout} does not cover {self.c_in} input channels")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kh(self) -> int:
        return self.weight.shape[2]

    @property
    def kw(self) -> int:
        return self.weight.shape[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kh) // self.stride + 1
        wo = (w + 2 * self.padding - self.kw) // self.stride + 1
        return ho, wo

    def copy(self) -> "Kernel":
        return Kernel(self.weight.copy(), self.stride, self.padding, self.layout)


def tree_sum(m: np.ndarray) -> np.ndarray:
    """Sum over axis 0 with a pairwise tree of elementwise adds.

    Unlike ``ndarray.sum`` the result for each trailing position depends only
    on the values at that position, never on its memory offset.
    """
    if m.shape[0] == 0:
        return np.zeros(m.shape[1:], m.dtype)
    while m.shape[0] > 1:
        if m.shape[0] % 2:
            m = np.concatenate([m, np.zeros_like(m[:1])])
        m = m[0::2] + m[1::2]
    return m[0]


def channel_sum(x: np.ndarray) -> np.ndarray:
    """Per-channel sum of an ``(N, C, H, W)`` batch over N, H and W."""
    c = x.shape[1]
    return tree_sum(x.transpose(0, 2, 3, 1).reshape(-1, c))


def spatial_sum(x: np.ndarray) -> np.ndarray:
    """Per-(sample, channel) sum of an ``(N, C, H, W)`` batch over H and W."""
    n, c, h, w = x.shape
    return tree_sum(x.transpose(2, 3, 0, 1).reshape(h * w, n, c))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected a (C,h,w) volume or (N,C,h,w) batch, got shape {x.shape}")


def pad_hw(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _partial_sum(w, xp, channels, s, ho, wo, shape, dtype):
    acc = np.zeros(shape, dtype)
    buf = np.empty(shape, dtype)
    kh, kw = w.shape[2], w.shape[3]
    for m in channels:
        for i in range(kh):
            for j in range(kw):
                np.multiply(w[None, :, m, i, j, None, None],
                            xp[:, m:m + 1, i:i + s * ho:s, j:j + s * wo:s], out=buf)
                acc += buf
    return acc


def conv2d(kernel: Kernel, x: np.ndarray) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernel`` (no bias).

    Accepts a single ``(C, h, w)`` volume or an ``(N, C, h, w)`` batch and
    returns the same rank.
    """
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if c != kernel.c_in:
        raise ChannelMismatch(f"input has {c} channels, kernel expects {kernel.c_in}")
    ho, wo = kernel.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise DegenerateOutput(f"output extent {ho}x{wo} from input {h}x{w}")
    dtype = np.result_type(kernel.weight.dtype, xb.dtype)
    xp = pad_hw(xb, kernel.padding)
    shape = (n, kernel.c_out, ho, wo)
    wgt, s = kernel.weight, kernel.stride
    if not exact_mode():
        win = sliding_window_view(xp, (kernel.kh, kernel.kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(win, wgt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out, dtype=dtype)
        return out[0] if single else out
    out = np.zeros(shape, dtype)
    start = 0
    for seg in kernel.layout:
        if seg.paired:
            left = _partial_sum(wgt, xp, range(start, start + seg.width), s, ho, wo, shape, dtype)
            right = _partial_sum(wgt, xp, range(start + seg.width, start + seg.span), s, ho, wo, shape, dtype)
            out += left + right
        else:
            out += _partial_sum(wgt, xp, range(start, start + seg.width), s, ho, wo, shape, dtype)
        start += seg.span
    return out[0] if single else out


def conv2d_backward(kernel: Kernel, x: np.ndarray, dy: np.ndarray, need_dx: bool = True):
    """Gradients of ``conv2d(kernel, x)`` given the upstream gradient ``dy``.

    Returns ``(dx, dW)``; ``dx`` is None when ``need_dx`` is false.
    """
    kh, kw, s, p = kernel.kh, kernel.kw, kernel.stride, kernel.padding
    n, c, h, w = x.shape
    ho, wo = dy.shape[2], dy.shape[3]
    xp = pad_hw(x, p)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    if not need_dx:
        return None, dw
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dy, kernel.weight[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, dw


def _check_geometry(parts, attrs):
    ref = parts[0]
    for k in parts[1:]:
        for a in attrs:
            if getattr(k, a) != getattr(ref, a):
                raise ShapeMismatch(f"kernels disagree on {a}: {getattr(k, a)} != {getattr(ref, a)}")


def kernel_vstack(parts: Sequence[Kernel]) -> Kernel:
    """Stack kernels along the output-channel axis.

    The input layout of the first part is kept; all parts must agree on the
    input channel count and geometry.
    """
    if not parts:
        raise ShapeMismatch("cannot vstack an empty list of kernels")
    _check_geometry(parts, ("c_in", "kh", "kw", "stride", "padding"))
    weight = np.concatenate([k.weight for k in parts], axis=0)
    return Kernel(weight, parts[0].stride, parts[0].padding, parts[0].layout)


def kernel_hstack(parts: Sequence[Kernel]) -> Kernel:
    """Concatenate kernels along the input-channel axis; layouts are concatenated."""
    if not parts:
        raise ShapeMismatch("cannot hstack an empty list of kernels")
    _check_geometry(parts, ("c_out", "kh", "kw", "stride", "padding"))
    weight = np.concatenate([k.weight for k in parts], axis=1)
    layout = tuple(seg for k in parts for seg in k.layout)
    return Kernel(weight, parts[0].stride, parts[0].padding, layout)


def kernel_hstack_pair(base: Kernel | None, left: np.ndarray, right: np.ndarray | None = None,
                       *, stride: int | None = None, padding: int | None = None) -> Kernel:
    """Append a paired input segment ``[left, right]`` to ``base``.

    ``right`` defaults to ``-left``, the cancelling choice.  ``base`` may be
    None, in which case the result consists of the pair alone.
    """
    if right is None:
        right = -left
    if left.shape != right.shape:
        raise ShapeMismatch(f"pair halves differ in shape: {left.shape} vs {right.shape}")
    e = left.shape[1]
    if base is None:
        return Kernel(np.concatenate([left, right], axis=1), stride or 1, padding or 0,
                      (Segment(e, True),))
    if left.shape[0] != base.c_out or left.shape[2:] != base.weight.shape[2:]:
        raise ShapeMismatch(f"pair block {left.shape} does not fit kernel {base.weight.shape}")
    weight = np.concatenate([base.weight, left, right], axis=1)
    return Kernel(weight, base.stride, base.padding, base.layout + (Segment(e, True),))


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    axis = 1 if parts[0].ndim == 4 else 0
    return np.concatenate(parts, axis=axis)


def tensor_stats(t: np.ndarray) -> tuple[float, float]:
    """Mean and population standard deviation of every element of ``t``."""
    if t.size == 0:
        raise ShapeMismatch("statistics of an empty tensor")
    flat = np.asarray(t, dtype=np.float64).ravel()
    mean = flat.mean()
    std = np.sqrt(np.mean((flat - mean) ** 2))
    return float(mean), float(std)
