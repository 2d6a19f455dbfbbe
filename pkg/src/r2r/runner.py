"""Config-driven training runs with mid-training transforms."""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchSpec, build_arch
from .autodiff import Optimizer, forward_backward, lr_schedule
from .data import batches, color_normalize, load_cifar10, synthetic_dataset
from .errors import ConfigError, PreservationError
from .graph import forward
from .metrics import MetricsLog, MetricsRecord, count_flops
from .morph import BASELINE_KINDS, FPT_KINDS, WIDEN_KINDS, InitSpec, deepen_all, widen_all
from .serialize import load_graph, save_graph
from .tensor import DTYPES, fast_arithmetic

log = logging.getLogger(__name__)

TRANSFORM_KINDS = FPT_KINDS + BASELINE_KINDS
PRESERVATION_TOL = 1e-3


@dataclass
class RunConfig:
    name: str = "run"
    arch: dict = field(default_factory=lambda: {"family": "TinyResNet", "width_multiplier": 1 / 16})
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 3e-3})
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    lr_drops: list = field(default_factory=list)
    transforms: list = field(default_factory=list)
    seed: int = 0
    dtype: str = "float32"
    out_dir: str | None = None
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    init_checkpoint: str | None = None
    eval_batch_size: int = 500
    # BLAS forward convolutions for training and per-epoch evaluation; the
    # measurements around a transform always use exact arithmetic
    fast_training: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        try:
            ArchSpec(**self.arch)
            Optimizer(**self.optimizer, weight_decay=self.weight_decay)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        for t in self.transforms:
            if t.get("kind") not in TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform kind {t.get('kind')!r}")
            if not 0 <= int(t.get("epoch", -1)) <= self.epochs:
                raise ConfigError(f"transform epoch {t.get('epoch')} outside [0, {self.epochs}]")
        if self.data.get("source", "synthetic") not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown data source {self.data.get('source')!r}")


def load_configs(path) -> list:
    """A config file holds one run object, a list of them, or ``{"runs": [...]}``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if isinstance(raw, dict) and "runs" in raw:
        raw = raw["runs"]
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not all(isinstance(r, dict) for r in raw):
        raise ConfigError(f"{path}: expected a run object or a list of them")
    return [RunConfig.from_dict(r) for r in raw]


def make_dataset(data: dict, dtype, seed=0):
    d = dict(data)
    src = d.pop("source", "synthetic")
    if src == "cifar10":
        directory = d.pop("dir", None)
        if directory is None:
            raise ConfigError("cifar10 data needs a 'dir'")
        ds = load_cifar10(directory)
        if d.pop("normalize", True):
            ds = color_normalize(ds)
        return ds.astype(dtype)
    d.setdefault("seed", seed)
    return synthetic_dataset(**d).astype(dtype)


def evaluate(net, x, y, batch_size=500, exact=True):
    """Eval-mode accuracy and mean loss."""
    correct, loss = 0, 0.0
    for s in range(0, len(y), batch_size):
        with fast_arithmetic(not exact):
            logits, p = forward(net, x[s:s + batch_size])
        yb = y[s:s + batch_size]
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        loss += float(-np.sum(np.log(np.maximum(p[np.arange(len(yb)), yb], 1e-30))))
    n = max(len(y), 1)
    return correct / n, loss / n


def train_epoch(net, opt, ds, batch_size, lr, rng, fast=True):
    loss_sum, correct, seen = 0.0, 0, 0
    for idx in batches(len(ds.y_train), batch_size, rng):
        xb, yb = ds.x_train[idx], ds.y_train[idx]
        with fast_arithmetic(fast):
            loss, grads, logits = forward_backward(net, xb, yb, train=True, update_stats=True)
        opt.step(net, grads, lr)
        loss_sum += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        seen += len(idx)
    return loss_sum / seen, correct / seen


def apply_transform(net, t: dict, seed: int = 0) -> list:
    """Apply one transform event; returns its MorphReports."""
    kind = t["kind"]
    init_d = dict(t.get("init", {}))
    init_d.setdefault("seed", seed)
    init = InitSpec(**init_d)
    if kind in WIDEN_KINDS:
        return widen_all(net, kind, float(t.get("factor", 1.5)), init, t.get("nodes"),
                         float(t.get("noise_std", 0.0)), t.get("zero_side", "out"))
    block = {k: t[k] for k in ("block_channels", "kernel_size", "final_sigma", "hidden_sigma") if k in t}
    return deepen_all(net, kind, int(t.get("repeat", 1)), init, t.get("sites"),
                      **({} if kind == "net2deeper" else block))


def expects_preservation(t: dict) -> bool:
    return t["kind"] in FPT_KINDS and not (t["kind"] == "net2wider" and t.get("noise_std", 0))


@dataclass
class RunResult:
    config: RunConfig
    log: MetricsLog
    events: list
    net: object
    out_dir: Path | None = None

    @property
    def records(self):
        return self.log.records

    def final_val_acc(self):
        return self.records[-1].val_acc if self.records else float("nan")


def run_experiment(cfg: RunConfig, dataset=None, verbose: bool = False, initial_net=None) -> RunResult:
    """Train per ``cfg``, applying transform events after the configured number of epochs.

    Row ``e`` of the metrics is the state after ``e`` completed epochs (row 0
    is the initial state); a transform at epoch ``e`` is applied right after
    row ``e`` is measured and tagged on it.  Function-preserving transforms
    must leave validation accuracy unchanged within 0.1% absolute.
    ``initial_net`` (copied, never mutated) overrides both the architecture
    and ``init_checkpoint``.
    """
    cfg.validate()
    dtype = DTYPES[cfg.dtype]
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    try:
        return _run(cfg, dataset, dtype, out, verbose, initial_net)
    except Exception as e:
        if out:
            (out / "error.json").write_text(json.dumps({"error": type(e).__name__, "message": str(e),
                                                        "traceback": traceback.format_exc()}, indent=2))
        raise


def _run(cfg, dataset, dtype, out, verbose, initial_net=None):
    ds = dataset if dataset is not None else make_dataset(cfg.data, dtype, cfg.seed)
    ds = ds.astype(dtype)
    if initial_net is not None:
        net = initial_net.copy()
        if net.dtype != np.dtype(dtype):
            net = _cast(net, dtype)
    elif cfg.init_checkpoint:
        net = load_graph(cfg.init_checkpoint)
        if net.dtype != np.dtype(dtype):
            net = _cast(net, dtype)
    else:
        arch = ArchSpec(**{**cfg.arch, "num_classes": ds.num_classes, "input_shape": ds.x_train.shape[1:]})
        net = build_arch(arch, seed=cfg.seed, dtype=dtype)
    opt = Optimizer(**cfg.optimizer, weight_decay=cfg.weight_decay)
    base_lr = opt.lr
    drops = [tuple(d) for d in cfg.lr_drops]
    by_epoch = {}
    for j, t in enumerate(cfg.transforms):
        by_epoch.setdefault(int(t["epoch"]), []).append((j, t))
    log_ = MetricsLog()
    events = []
    t0 = time.perf_counter()
    examples, flops = 0, 0.0
    train_loss, train_acc = float("nan"), float("nan")
    n_train = len(ds.y_train)
    for epoch in range(cfg.epochs + 1):
        if epoch > 0:
            rng = np.random.default_rng([cfg.seed, epoch])
            lr = lr_schedule(epoch - 1, base_lr, drops)
            step_flops = count_flops(net).train_step_flops_per_example
            train_loss, train_acc = train_epoch(net, opt, ds, cfg.batch_size, lr, rng, cfg.fast_training)
            examples += n_train
            flops += float(step_flops) * n_train
        val_acc, _ = evaluate(net, ds.x_val, ds.y_val, cfg.eval_batch_size, exact=not cfg.fast_training)
        tags = []
        for j, t in by_epoch.get(epoch, []):
            pre = evaluate(net, ds.x_val, ds.y_val, cfg.eval_batch_size)[0]
            reports = apply_transform(net, t, seed=cfg.seed * 7919 + j)
            post = evaluate(net, ds.x_val, ds.y_val, cfg.eval_batch_size)[0]
            opt.reset()
            ev = {"epoch": epoch, "kind": t["kind"], "pre_val_acc": pre, "post_val_acc": post,
                  "delta": post - pre, "preserving": expects_preservation(t),
                  "params_after": net.num_parameters(), "reports": [r.to_dict() for r in reports]}
            events.append(ev)
            tags.append(t["kind"])
            if verbose:
                log.info("epoch %d: %s val %.4f -> %.4f", epoch, t["kind"], pre, post)
            if ev["preserving"] and abs(post - pre) > PRESERVATION_TOL:
                raise PreservationError(f"{t['kind']} at epoch {epoch} changed val accuracy {pre:.4f} -> {post:.4f}")
        log_.record(MetricsRecord(epoch, examples, flops, train_loss, train_acc, val_acc,
                                  time.perf_counter() - t0, ";".join(tags)))
        if verbose:
            log.info("%s epoch %d loss %.4f train %.4f val %.4f", cfg.name, epoch, train_loss, train_acc, val_acc)
    result = RunResult(cfg, log_, events, net, out)
    if out:
        log_.emit_csv(out / "metrics.csv")
        (out / "events.json").write_text(json.dumps(events, indent=2, default=_json_default))
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
        save_graph(net, out / "final.json")
    return result


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _cast(net, dtype):
    for key, arr in list(net.parameters().items()):
        net.set_parameter(key, arr.astype(dtype))
    for nd in net.nodes:
        for st in nd.layer.sigma:
            for k in st.buffer_names:
                setattr(st, k, getattr(st, k).astype(dtype))
    return net


def run_many(configs, out_root=None, dataset=None) -> dict:
    """Run several configs and write ``summary.json`` under ``out_root``."""
    summary = {}
    for cfg in configs:
        if out_root is not None and cfg.out_dir is None:
            cfg.out_dir = str(Path(out_root) / cfg.name)
        res = run_experiment(cfg, dataset)
        last = res.records[-1]
        summary[cfg.name] = {"final_val_acc": last.val_acc, "final_train_loss": last.train_loss,
                             "flops": last.flops, "events": [{k: e[k] for k in ("epoch", "kind", "pre_val_acc",
                                                                                 "post_val_acc", "delta")}
                                                             for e in res.events]}
    if out_root is not None:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary

