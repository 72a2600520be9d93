"""Training loop and dataset evaluation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mrcfa.core.nn import Module, Parameter
from mrcfa.core.tensor import backward, no_grad, precision
from mrcfa.data import VideoClip
from mrcfa.metrics import MetricReport, evaluate_predictions
from mrcfa.model import IGNORE_INDEX, MRCFA, segmentation_loss

log = logging.getLogger(__name__)


class NonFiniteLoss(ArithmeticError):
    pass


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= lr * v


class AdamW:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1 - step / max(total, 1)) ** power


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{l:.8f}\n" for i, l in enumerate(self.losses))


def sample_schedule(clips: Sequence[VideoClip], steps: int, seed: int) -> list[tuple[int, int]]:
    """(video, target frame) pairs drawn uniformly; identical for equal seeds."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(steps):
        v = int(rng.integers(len(clips)))
        out.append((v, int(rng.integers(len(clips[v])))))
    return out


def train(
    model: MRCFA,
    clips: Sequence[VideoClip],
    steps: int,
    lr: float = 0.01,
    optimizer: str = "sgd",
    poly: bool = False,
    seed: Optional[int] = None,
    schedule: Optional[Sequence[tuple[int, int]]] = None,
    log_every: int = 0,
) -> TrainResult:
    """Single-clip-batch training on (reference frames, target) samples."""
    if not clips:
        raise ValueError("cannot train on an empty dataset")
    cfg = model.cfg
    params = model.parameters()
    opt = SGD(params, lr) if optimizer == "sgd" else AdamW(params, lr)
    if schedule is None:
        schedule = sample_schedule(clips, steps, cfg.seed if seed is None else seed)
    result = TrainResult()
    with precision(cfg.precision):
        for step in range(steps):
            v, t = schedule[step]
            clip = clips[v]
            frames = clip.clip_at(t, cfg.reference_offsets) if cfg.T > 1 else [clip.frames[t]]
            model.zero_grad()
            loss = segmentation_loss(model(frames), clip.labels[t], IGNORE_INDEX)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at step {step} (video {clip.video_id}, frame {t})")
            backward(loss)
            if lr != 0:
                opt.step(poly_lr(lr, step, steps) if poly else lr)
            result.losses.append(value)
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f", step, value)
    return result


def predict_video(model: MRCFA, clip: VideoClip) -> list[np.ndarray]:
    """Predictions for every frame; each frame is encoded once and reused as a reference."""
    cfg = model.cfg
    with no_grad(), precision(cfg.precision):
        cache = [model.encode_frame(f, i) for i, f in enumerate(clip.frames)]
        preds = []
        for t in range(len(clip)):
            refs = [cache[max(0, t + o)] for o in cfg.reference_offsets] if cfg.T > 1 else []
            logits = model.forward_cached(cache[t], refs)
            preds.append(np.argmax(logits.data, axis=0).astype(np.uint8))
    return preds


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MRCFA_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(
    model: Optional[MRCFA],
    clips: Sequence[VideoClip],
    num_classes: int,
    window: int = 4,
    strict: bool = True,
    gt_as_prediction: bool = False,
) -> MetricReport:
    """mIoU, WIoU and mVC over ``clips``. ``gt_as_prediction`` scores the labels against themselves."""
    if not clips:
        raise ValueError("cannot evaluate an empty dataset")

    def run(clip: VideoClip):
        preds = [l.copy() for l in clip.labels] if gt_as_prediction else predict_video(model, clip)
        return clip.labels, preds

    workers = worker_count()
    if workers > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(run, clips))
    else:
        pairs = [run(c) for c in clips]
    return evaluate_predictions(pairs, num_classes, window, strict, IGNORE_INDEX)


def parameters_equal(a: Module, b: Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
