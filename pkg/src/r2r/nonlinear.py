"""Channel-wise nonlinearity stages composed into a layer's pipeline.

Every stage maps channel ``c`` of its input using only channel ``c`` and the
stage's own per-channel parameters, so equal input channels with equal
parameters give equal output channels.  Reductions on the forward path go
through :func:`r2r.tensor.channel_sum` to keep that equality bitwise.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .tensor import channel_sum, pad_hw


class Stage:
    kind = "stage"
    #: names of trainable per-channel parameter arrays
    param_names: tuple = ()
    #: names of non-trainable per-channel buffers
    buffer_names: tuple = ()

    def forward(self, x, train=False, cache=None, update_stats=False):
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return ``(dx, {param_name: grad})``."""
        raise NotImplementedError

    def out_hw(self, h, w):
        return h, w

    def flops(self, c, h, w):
        """One FLOP per output element; see :mod:`r2r.metrics`."""
        ho, wo = self.out_hw(h, w)
        return c * ho * wo

    def params(self):
        return {k: getattr(self, k) for k in self.param_names}

    def buffers(self):
        return {k: getattr(self, k) for k in self.buffer_names}

    @property
    def channels(self):
        return None

    def extend_channels(self, count: int, source=None):
        """Append ``count`` channels; copy parameters from ``source`` indices if given."""

    def config(self) -> dict:
        return {}

    def to_dict(self):
        from .serialize import tensor_to_dict
        d = {"kind": self.kind, **self.config()}
        for k in self.param_names + self.buffer_names:
            d[k] = tensor_to_dict(getattr(self, k))
        return d

    def copy(self):
        from .serialize import stage_from_dict
        return stage_from_dict(self.to_dict())

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        ch = self.channels
        return f"{type(self).__name__}({'C=%d' % ch if ch is not None else ''}{', ' if ch is not None and cfg else ''}{cfg})"


class Identity(Stage):
    kind = "identity"

    def forward(self, x, train=False, cache=None, update_stats=False):
        return x

    def backward(self, dy, cache):
        return dy, {}

    def flops(self, c, h, w):
        return 0


class ReLU(Stage):
    """Rectifier; ``subgradient_at_zero`` is the derivative used at exactly 0."""

    kind = "relu"

    def __init__(self, subgradient_at_zero: float = 1.0):
        self.subgradient_at_zero = float(subgradient_at_zero)

    def forward(self, x, train=False, cache=None, update_stats=False):
        if cache is not None:
            cache["x"] = x
        return np.maximum(x, 0).astype(x.dtype, copy=False)

    def backward(self, dy, cache):
        x = cache["x"]
        slope = np.where(x > 0, 1.0, np.where(x == 0, self.subgradient_at_zero, 0.0))
        return dy * slope.astype(dy.dtype), {}

    def config(self):
        return {"subgradient_at_zero": self.subgradient_at_zero}


class Tanh(Stage):
    kind = "tanh"

    def forward(self, x, train=False, cache=None, update_stats=False):
        y = np.tanh(x)
        if cache is not None:
            cache["y"] = y
        return y

    def backward(self, dy, cache):
        return dy * (1 - cache["y"] ** 2), {}


class Sigmoid(Stage):
    kind = "sigmoid"

    def forward(self, x, train=False, cache=None, update_stats=False):
        y = 1 / (1 + np.exp(-x))
        if cache is not None:
            cache["y"] = y
        return y

    def backward(self, dy, cache):
        y = cache["y"]
        return dy * y * (1 - y), {}


class BatchNorm(Stage):
    """Per-channel batch normalisation with affine parameters.

    Train mode normalises with the batch statistics; eval mode uses the
    running estimates.
    """

    kind = "batchnorm"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels=None, gamma=None, beta=None, running_mean=None, running_var=None,
                 eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        if gamma is None:
            gamma = np.ones(channels, dtype)
        self.gamma = np.asarray(gamma)
        dt = self.gamma.dtype
        c = self.gamma.shape[0]
        self.beta = np.zeros(c, dt) if beta is None else np.asarray(beta, dt)
        self.running_mean = np.zeros(c, dt) if running_mean is None else np.asarray(running_mean, dt)
        self.running_var = np.ones(c, dt) if running_var is None else np.asarray(running_var, dt)
        self.eps = float(eps)
        self.momentum = float(momentum)
        for k in ("beta", "running_mean", "running_var"):
            if getattr(self, k).shape != (c,):
                raise ShapeMismatch(f"batchnorm {k} has shape {getattr(self, k).shape}, expected ({c},)")

    @property
    def channels(self):
        return self.gamma.shape[0]

    def _bcast(self, v):
        return v[None, :, None, None]

    def forward(self, x, train=False, cache=None, update_stats=False):
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm over {self.channels} channels got {x.shape[1]}")
        dt = x.dtype
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = channel_sum(x) / dt.type(m)
            xc = x - self._bcast(mean)
            var = channel_sum(xc * xc) / dt.type(m)
            if update_stats:
                mom = self.momentum
                unbiased = var * (m / (m - 1)) if m > 1 else var
                self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
                self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        else:
            xc = x - self._bcast(self.running_mean.astype(dt))
            var = self.running_var.astype(dt)
        inv = (1 / np.sqrt(var + dt.type(self.eps))).astype(dt)
        xhat = xc * self._bcast(inv)
        if cache is not None:
            cache.update(xhat=xhat, inv=inv, train=train)
        return xhat * self._bcast(self.gamma.astype(dt)) + self._bcast(self.beta.astype(dt))

    def backward(self, dy, cache):
        xhat, inv = cache["xhat"], cache["inv"]
        dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
        dbeta = np.sum(dy, axis=(0, 2, 3))
        dxhat = dy * self._bcast(self.gamma)
        if cache["train"]:
            m = dy.shape[0] * dy.shape[2] * dy.shape[3]
            s1 = np.sum(dxhat, axis=(0, 2, 3))
            s2 = np.sum(dxhat * xhat, axis=(0, 2, 3))
            dx = self._bcast(inv / m) * (m * dxhat - self._bcast(s1) - xhat * self._bcast(s2))
        else:
            dx = dxhat * self._bcast(inv)
        return dx.astype(dy.dtype, copy=False), {"gamma": dgamma, "beta": dbeta}

    def extend_channels(self, count, source=None):
        if source is not None:
            src = np.asarray(source)
            new = {k: getattr(self, k)[src] for k in self.param_names + self.buffer_names}
        else:
            dt = self.gamma.dtype
            new = {"gamma": np.ones(count, dt), "beta": np.zeros(count, dt),
                   "running_mean": np.zeros(count, dt), "running_var": np.ones(count, dt)}
        for k, v in new.items():
            setattr(self, k, np.concatenate([getattr(self, k), v]))

    def config(self):
        return {"eps": self.eps, "momentum": self.momentum}


class _Pool(Stage):
    def __init__(self, k: int, stride: int | None = None, padding: int = 0):
        self.k = int(k)
        self.stride = int(stride if stride is not None else k)
        self.padding = int(padding)
        if self.k < 1 or self.stride < 1 or not 0 <= self.padding < self.k:
            raise ShapeMismatch(f"bad pooling geometry k={k} stride={stride} padding={padding}")

    def out_hw(self, h, w):
        p, k, s = self.padding, self.k, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _windows(self, h, w):
        ho, wo = self.out_hw(h, w)
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"pooling {self.k}x{self.k} does not fit {h}x{w}")
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                yield (slice(i, i + s * ho, s), slice(j, j + s * wo, s))

    def config(self):
        return {"k": self.k, "stride": self.stride, "padding": self.padding}


class MaxPool(_Pool):
    """Max pooling; ties resolve to the first window position in scan order."""

    kind = "maxpool"

    def forward(self, x, train=False, cache=None, update_stats=False):
        xp = pad_hw(x, self.padding, -np.inf)
        out = arg = None
        for idx, (si, sj) in enumerate(self._windows(x.shape[2], x.shape[3])):
            v = xp[:, :, si, sj]
            if out is None:
                out = v.copy()
                arg = np.zeros(v.shape, np.int32)
            else:
                better = v > out
                out = np.where(better, v, out)
                arg[better] = idx
        if cache is not None:
            cache.update(arg=arg, shape=xp.shape)
        return out

    def backward(self, dy, cache):
        arg = cache["arg"]
        dxp = np.zeros(cache["shape"], dy.dtype)
        h = cache["shape"][2] - 2 * self.padding
        w = cache["shape"][3] - 2 * self.padding
        for idx, (si, sj) in enumerate(self._windows(h, w)):
            dxp[:, :, si, sj] += np.where(arg == idx, dy, 0)
        p = self.padding
        return (dxp[:, :, p:p + h, p:p + w] if p else dxp), {}


class AvgPool(_Pool):
    """Average pooling; padded positions count as zeros in the k*k divisor."""

    kind = "avgpool"

    def forward(self, x, train=False, cache=None, update_stats=False):
        xp = pad_hw(x, self.padding)
        out = None
        for si, sj in self._windows(x.shape[2], x.shape[3]):
            out = xp[:, :, si, sj].copy() if out is None else out + xp[:, :, si, sj]
        if cache is not None:
            cache["shape"] = xp.shape
        return out / x.dtype.type(self.k * self.k)

    def backward(self, dy, cache):
        dxp = np.zeros(cache["shape"], dy.dtype)
        h = cache["shape"][2] - 2 * self.padding
        w = cache["shape"][3] - 2 * self.padding
        g = dy / dy.dtype.type(self.k * self.k)
        for si, sj in self._windows(h, w):
            dxp[:, :, si, sj] += g
        p = self.padding
        return (dxp[:, :, p:p + h, p:p + w] if p else dxp), {}


STAGES = {cls.kind: cls for cls in (Identity, ReLU, Tanh, Sigmoid, BatchNorm, MaxPool, AvgPool)}


def pipeline_forward(stages, x, train=False, caches=None, update_stats=False):
    for k, st in enumerate(stages):
        c = None
        if caches is not None:
            c = {}
            caches.append(c)
        x = st.forward(x, train=train, cache=c, update_stats=update_stats)
    return x


def pipeline_out_hw(stages, h, w):
    for st in stages:
        h, w = st.out_hw(h, w)
    return h, w


def maps_zero_to_zero(stages, channels: int, dtype=np.float64) -> bool:
    """True when the pipeline sends an all-zero input to an all-zero output.

    Checked numerically in both train and eval mode on a small zero batch.
    """
    probe = np.zeros((2, channels, 4, 4), dtype)
    saved = [{k: v.copy() for k, v in st.buffers().items()} for st in stages]
    try:
        for train in (False, True):
            if np.any(pipeline_forward(stages, probe, train=train) != 0):
                return False
    except ShapeMismatch:
        # pooling that does not fit the probe; try a larger one
        probe = np.zeros((2, channels, 32, 32), dtype)
        for train in (False, True):
            if np.any(pipeline_forward(stages, probe, train=train) != 0):
                return False
    finally:
        for st, buf in zip(stages, saved):
            for k, v in buf.items():
                getattr(st, k)[...] = v
    return True


def make_stage(spec, channels: int, dtype=np.float32) -> Stage:
    """Build a stage from a name (``"relu"``, ``"batchnorm"``, ...) or pass a Stage through."""
    if isinstance(spec, Stage):
        return spec
    if isinstance(spec, dict):
        from .serialize import stage_from_dict
        if spec.get("kind") == "batchnorm" and "gamma" not in spec:
            return BatchNorm(channels, dtype=dtype, **{k: v for k, v in spec.items() if k != "kind"})
        return stage_from_dict(spec)
    name = str(spec).lower()
    if name == "batchnorm":
        return BatchNorm(channels, dtype=dtype)
    if name not in STAGES or name in ("maxpool", "avgpool"):
        raise ValueError(f"cannot build stage {spec!r} from a bare name")
    return STAGES[name]()


def make_pipeline(specs, channels: int, dtype=np.float32) -> list:
    if specs is None:
        return []
    if isinstance(specs, (str, Stage, dict)):
        specs = [specs]
    return [make_stage(s, channels, dtype) for s in specs]
