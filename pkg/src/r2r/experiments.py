"""Scaled-down experiment drivers on the synthetic task.

These are the desk-scale analogues of the long CIFAR-10 runs: a FLOP-budget
comparison between growing a small network and training the large one from
scratch, a check that accuracy is continuous across transforms, and an
initialisation-scale ablation for widening.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import synthetic_dataset
from .metrics import flops_to_reach
from .runner import RunConfig, run_experiment

log = logging.getLogger(__name__)

SYNTH = {"n": 5000, "classes": 10, "difficulty": 0.8, "n_val": 1000}
TEACHER_WIDTH = 1 / 8
WIDEN_FACTOR = 1.5


def _dataset(seed, **over):
    return synthetic_dataset(seed, **{**SYNTH, **over})


def _arch(width, residual=True):
    return {"family": "TinyResNet", "width_multiplier": width, "residual": residual}


@dataclass
class TrendResult:
    seeds: list
    teacher_curve: list      # mean val accuracy per row
    teacher_flops: list      # mean cumulative training FLOPs per row
    scratch_curve: list
    scratch_flops: list
    target: float            # scratch student's final val accuracy, seed mean
    flops_at_target: float | None
    flop_ratio: float | None
    budget: float
    passed: bool
    events: list = field(default_factory=list)
    seconds: float = 0.0


def faster_training_trend(seeds=(0, 1, 2), teacher_epochs=10, student_epochs=20, budget=0.9, lr_drop=0.2,
                          verbose=False) -> TrendResult:
    """Grow-then-train against train-from-scratch at a fixed FLOP budget.

    Path A trains the teacher for ``teacher_epochs``, widens every layer by
    1.5 with ``r2_wider`` and trains ``student_epochs`` more.  Path B trains
    the widened architecture from scratch for the same total number of
    epochs.  Both paths multiply the learning rate by ``lr_drop`` at the
    widening epoch.  Curves are averaged over seeds before comparing.
    """
    t0 = time.perf_counter()
    total = teacher_epochs + student_epochs
    drops = [[teacher_epochs, lr_drop]]
    grown, scratch, events = [], [], []
    for seed in seeds:
        ds = _dataset(seed)
        a = run_experiment(RunConfig(name=f"grow-{seed}", arch=_arch(TEACHER_WIDTH), epochs=total, lr_drops=drops,
                                     transforms=[{"epoch": teacher_epochs, "kind": "r2_wider",
                                                  "factor": WIDEN_FACTOR}], seed=seed), ds)
        b = run_experiment(RunConfig(name=f"scratch-{seed}", arch=_arch(TEACHER_WIDTH * WIDEN_FACTOR), epochs=total,
                                     lr_drops=drops, seed=seed), ds)
        grown.append(a.records)
        scratch.append(b.records)
        events += a.events
        if verbose:
            log.info("seed %d: grown %.4f scratch %.4f", seed, a.final_val_acc(), b.final_val_acc())
    gc = np.mean([[r.val_acc for r in rs] for rs in grown], axis=0)
    gf = np.mean([[r.flops for r in rs] for rs in grown], axis=0)
    sc = np.mean([[r.val_acc for r in rs] for rs in scratch], axis=0)
    sf = np.mean([[r.flops for r in rs] for rs in scratch], axis=0)
    target = float(sc[-1])
    hit = next((float(f) for acc, f in zip(gc, gf) if acc >= target), None)
    ratio = None if hit is None else hit / float(sf[-1])
    return TrendResult(list(seeds), gc.tolist(), gf.tolist(), sc.tolist(), sf.tolist(), target, hit, ratio, budget,
                       ratio is not None and ratio <= budget, events, time.perf_counter() - t0)


CONTINUITY_RUNS = [
    # (kind, residual architecture, extra transform fields)
    ("r2_wider", True, {}),
    ("r2_deeper", True, {}),
    ("netmorph_wider", True, {}),
    ("net2wider", False, {}),
    ("net2deeper", False, {}),
    ("random_pad_widen", True, {}),
    ("random_pad_deepen", True, {}),
]


def transform_continuity(seed=0, epochs_before=3, epochs_after=1, runs=CONTINUITY_RUNS) -> list:
    """Val accuracy immediately before and after each kind of transform."""
    ds = _dataset(seed)
    out = []
    for kind, residual, extra in runs:
        t = {"epoch": epochs_before, "kind": kind, **extra}
        res = run_experiment(RunConfig(name=f"cont-{kind}", arch=_arch(TEACHER_WIDTH, residual),
                                       epochs=epochs_before + epochs_after, transforms=[t], seed=seed), ds)
        ev = res.events[0]
        out.append({"kind": kind, "pre": ev["pre_val_acc"], "post": ev["post_val_acc"], "delta": ev["delta"],
                    "preserving": ev["preserving"]})
    return out


def init_scale_ablation(seeds=(0, 1, 2), teacher_epochs=5, multiplier=10.0) -> list:
    """First post-widen epoch's training loss: matched-std init against a scaled-up one.

    Both arms start from the same trained teacher and see the same batches.
    """
    rows = []
    for seed in seeds:
        ds = _dataset(seed)
        teacher = run_experiment(RunConfig(name=f"abl-teacher-{seed}", arch=_arch(TEACHER_WIDTH),
                                           epochs=teacher_epochs, seed=seed), ds).net
        losses = {}
        for label, init in (("matched_std", {"scheme": "matched_std"}),
                            ("scaled", {"scheme": "scaled_matched_std", "multiplier": multiplier})):
            res = run_experiment(RunConfig(name=f"abl-{label}-{seed}", epochs=1, seed=seed,
                                           transforms=[{"epoch": 0, "kind": "r2_wider", "factor": WIDEN_FACTOR,
                                                        "init": init}]), ds, initial_net=teacher)
            losses[label] = res.records[1].train_loss
        rows.append({"seed": seed, **losses, "increased": losses["scaled"] > losses["matched_std"]})
    return rows
