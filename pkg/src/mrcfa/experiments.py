"""Desk-scale experiment runners: learning signal, overfit sanity and ablations.

The desk preset uses encoder strides 2/4/8 (so a 32x32 frame keeps a 4x4
deepest grid of 16 tokens) and corrupts about a third of the frames with
strong noise, which is where looking at other frames pays off.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mrcfa.cost import cost_affinity_path
from mrcfa.data import VideoClip, make_dataset
from mrcfa.model import MRCFA, ModelConfig
from mrcfa.train import evaluate, train

log = logging.getLogger(__name__)

DESK_STRIDES = (2, 4, 8)
DESK_SCENE = dict(noise=0.05, flicker=0.35, flicker_noise=0.6)
DESK_OFFSETS = (-9, -6, -3)
AXES = ("p", "L", "T")


def desk_config(**kw) -> ModelConfig:
    return ModelConfig(**{"strides": DESK_STRIDES, **kw})


def offsets_for(T: int, step: int = 3) -> tuple[int, ...]:
    """T-1 references spaced ``step`` frames apart, farthest first."""
    if T < 1:
        raise ValueError("clip length T must be >= 1")
    return tuple(-step * k for k in range(T - 1, 0, -1))


def apply_axis(cfg: ModelConfig, axis: str, value) -> ModelConfig:
    if axis == "p":
        return cfg.replace(p=float(value))
    if axis == "L":
        return cfg.replace(num_scales=int(value))
    if axis == "T":
        return cfg.replace(reference_offsets=offsets_for(int(value)))
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


@dataclass
class RunResult:
    seed: int
    tail_loss: float
    miou: float
    wiou: float
    mvc: float
    params: int
    flops: int


def run_once(
    cfg: ModelConfig,
    train_clips: Sequence[VideoClip],
    test_clips: Sequence[VideoClip],
    steps: int,
    lr: float = 0.01,
    optimizer: str = "sgd",
    window: int = 4,
) -> RunResult:
    model = MRCFA(cfg)
    losses = train(model, train_clips, steps, lr=lr, optimizer=optimizer, poly=True).losses
    rep = evaluate(model, test_clips, cfg.num_classes, window)
    tail = float(np.mean(losses[-100:])) if losses else float("nan")
    return RunResult(cfg.seed, tail, rep.miou, rep.wiou, rep.mvc, model.num_parameters(), cost_affinity_path(cfg).total_flops)


def desk_data(seed: int, train_videos: int = 8, test_videos: int = 4, frames: int = 12, size: int = 32, num_classes: int = 4):
    """Train and test clips for one seed; the two sets never share a scene."""
    train_clips = make_dataset(1000 + seed, train_videos, frames, size, num_classes, **DESK_SCENE)
    test_clips = make_dataset(2000 + seed, test_videos, frames, size, num_classes, **DESK_SCENE)
    return train_clips, test_clips


@dataclass
class SignalResult:
    multi: list[RunResult]
    single: list[RunResult]

    def median(self, which: str, metric: str) -> float:
        runs = self.multi if which == "multi" else self.single
        return statistics.median(getattr(r, metric) for r in runs)


def learning_signal(seeds: Sequence[int] = (0, 1, 2, 3, 4), steps: int = 2000, lr: float = 0.01) -> SignalResult:
    """Multi-frame model (T=4) against the single-frame baseline, same data and seed."""
    out = SignalResult([], [])
    for seed in seeds:
        train_clips, test_clips = desk_data(seed)
        for offsets, bucket in ((DESK_OFFSETS, out.multi), ((), out.single)):
            res = run_once(desk_config(reference_offsets=offsets, seed=seed), train_clips, test_clips, steps, lr)
            log.info("seed %d T=%d mIoU %.3f mVC %.3f", seed, len(offsets) + 1, res.miou, res.mvc)
            bucket.append(res)
    return out


@dataclass
class OverfitResult:
    losses: list[float]
    miou: float

    def first_below(self, level: float, smooth: int = 10) -> Optional[int]:
        """First step whose trailing ``smooth``-step mean loss is below ``level``."""
        for i in range(len(self.losses)):
            if np.mean(self.losses[max(0, i - smooth + 1) : i + 1]) < level:
                return i
        return None


def overfit(seed: int = 0, steps: int = 1000, lr: float = 3e-3) -> OverfitResult:
    clip = make_dataset(7 + seed, 1, frames=12)
    model = MRCFA(desk_config(seed=seed))
    losses = train(model, clip, steps, lr=lr, optimizer="adamw", poly=True).losses
    return OverfitResult(losses, evaluate(model, clip, model.cfg.num_classes, 4).miou)


@dataclass
class AblationRow:
    axis: str
    value: str
    runs: list[RunResult]

    def median(self, metric: str) -> float:
        return statistics.median(getattr(r, metric) for r in self.runs)


def ablation(
    axis: str,
    values: Sequence,
    base: ModelConfig,
    train_clips: Sequence[VideoClip],
    test_clips: Sequence[VideoClip],
    steps: int,
    seeds: Sequence[int] = (0,),
    lr: float = 0.01,
    optimizer: str = "sgd",
    window: int = 4,
) -> list[AblationRow]:
    if len(values) < 2:
        raise ValueError("an ablation needs at least two values")
    rows = []
    for v in values:
        runs = [run_once(apply_axis(base, axis, v).replace(seed=s), train_clips, test_clips, steps, lr, optimizer, window) for s in seeds]
        rows.append(AblationRow(axis, str(v), runs))
    if axis == "T" and len(seeds) >= 3:
        mvcs = [r.median("mvc") for r in rows]
        if any(b < a for a, b in zip(mvcs, mvcs[1:])):
            log.warning("median mVC is not non-decreasing in T: %s", [round(m, 4) for m in mvcs])
    return rows


def ablation_csv(rows: Sequence[AblationRow], window: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "seeds", "mIoU", f"mVC{window}", "params", "flops"])
    for r in rows:
        w.writerow([r.axis, r.value, len(r.runs), f"{r.median('miou'):.6f}", f"{r.median('mvc'):.6f}", r.runs[0].params, r.runs[0].flops])
    return buf.getvalue()
