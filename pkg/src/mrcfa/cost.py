"""Analytic FLOP / activation accounting for the cross-frame affinity path.

Convention: one multiply-accumulate = 2 FLOPs. Activations are counted in
elements, not bytes.

Stages, summed over the T-1 references (queries once per target):

  query_proj       2 * H_l W_l * C_l^2            per scale
  key_proj         2 * H_l W_l * C_l^2            per scale, per reference
  key_downsample   2 * H_L W_L * C_l^2 * k_h k_w  per scale l < L, per reference
  full_affinity    2 * (H_L W_L)^2 * C_L          deepest scale, per reference
  affinity         2 * H_l W_l * S * C_l          per scale l < L, per reference
  sar              depth * 2 * S^2 * 9 * H_l W_l  per scale, per reference
  maa              depth * 2 * S^2 * 9 * H_l W_l  per level l < L, per reference
  retrieval        2 * H_1 W_1 * S * C_hat        per reference

Peak activations assume references are processed one after another: the
target's queries, the running list of retrieved outputs and the target's
fused feature stay live, plus whatever the current reference holds at its
largest moment (full deepest affinity, all masked affinities, and the two
buffers of the biggest conv in the decoder).
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mrcfa.model import MRCFA, ModelConfig

STAGES = ("query_proj", "key_proj", "key_downsample", "full_affinity", "affinity", "sar", "maa", "retrieval")


@dataclass
class CostReport:
    flops: dict[str, int] = field(default_factory=dict)
    peak_activations: int = 0
    params: int = 0

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# flops count one multiply-accumulate as 2; act_elems are element counts\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "flops", "act_elems", "params"])
        for name in STAGES:
            w.writerow([name, self.flops.get(name, 0), "", ""])
        w.writerow(["total", self.total_flops, self.peak_activations, self.params])
        return buf.getvalue()


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count of ``MRCFA(cfg)``."""
    total = 0
    c_prev, s_prev = 3, 1
    for c, s in zip(cfg.channels, cfg.strides):
        n = max(1, int(np.log2(s // s_prev)))
        total += c_prev * c * 9 + c + (n - 1) * (c * c * 9 + c)
        c_prev, s_prev = c, s
    chans = cfg.used_channels()
    total += sum(c * cfg.c_hat + cfg.c_hat for c in chans)  # fuse projections
    total += cfg.c_hat * cfg.c_hat + cfg.c_hat  # fuse output
    total += cfg.c_hat * cfg.num_classes + cfg.num_classes  # head
    if cfg.T == 1:
        return total
    dims = cfg.scale_dims()
    hl, wl = dims[-1]
    total += sum(2 * c * c for c in chans)  # W_query, W_key
    for c, (h, w) in zip(chans[:-1], dims[:-1]):
        total += c * c * (h // hl) * (w // wl)
    if cfg.mode == "pyramid":
        return total + sum(c * cfg.c_hat + cfg.c_hat for c in chans)
    s = cfg.width()
    per_stack = cfg.decoder_depth * (s * s * 9 + s)
    stacks = (cfg.num_scales if cfg.sar else 0) + ((cfg.num_scales - 1) if cfg.maa else 0)
    return total + stacks * per_stack


def cost_affinity_path(cfg: ModelConfig, dims: Optional[tuple[int, int]] = None) -> CostReport:
    if dims is not None:
        cfg = cfg.replace(image_size=tuple(dims))
    report = CostReport(flops={k: 0 for k in STAGES}, params=count_parameters(cfg))
    refs = cfg.T - 1
    if refs == 0:
        return report
    scale_dims = cfg.scale_dims()
    chans = cfg.used_channels()
    hl, wl = scale_dims[-1]
    tokens = hl * wl
    s = cfg.width()
    depth = cfg.decoder_depth
    f = report.flops
    for level, (c, (h, w)) in enumerate(zip(chans, scale_dims)):
        hw = h * w
        f["query_proj"] += 2 * hw * c * c
        f["key_proj"] += refs * 2 * hw * c * c
        if level < len(chans) - 1:
            f["key_downsample"] += refs * 2 * tokens * c * c * (h // hl) * (w // wl)
            f["affinity"] += refs * 2 * hw * s * c
            if cfg.mode == "mrcfa" and cfg.maa:
                f["maa"] += refs * depth * 2 * s * s * 9 * hw
        if cfg.mode == "mrcfa" and cfg.sar:
            f["sar"] += refs * depth * 2 * s * s * 9 * hw
    f["full_affinity"] = refs * 2 * tokens * tokens * chans[-1]
    h1, w1 = scale_dims[0]
    if cfg.mode == "mrcfa":
        f["retrieval"] = refs * 2 * h1 * w1 * s * cfg.c_hat
    else:
        f["retrieval"] = refs * sum(2 * h * w * s * c for c, (h, w) in zip(chans, scale_dims))
    report.peak_activations = peak_activations(cfg)
    return report


def peak_activations(cfg: ModelConfig) -> int:
    refs = cfg.T - 1
    scale_dims = cfg.scale_dims()
    chans = cfg.used_channels()
    hl, wl = scale_dims[-1]
    tokens = hl * wl
    s = cfg.width()
    h1, w1 = scale_dims[0]
    queries = sum(h * w * c for c, (h, w) in zip(chans, scale_dims))
    fused = cfg.c_hat * h1 * w1
    out = h1 * w1 * cfg.c_hat
    masked = sum(h * w * s for h, w in scale_dims)
    biggest_conv = 2 * max(h * w * s for h, w in scale_dims)
    per_ref = tokens * tokens + masked + biggest_conv
    peak = 0
    for i in range(refs):
        peak = max(peak, queries + fused + i * out + per_ref)
    return peak


@dataclass
class RuntimeStats:
    median: float
    iqr: float
    samples: list[float]
    flops: int


def measure_runtime(cfg: ModelConfig, dims: Optional[tuple[int, int]] = None, repeats: int = 3, seed: int = 0) -> RuntimeStats:
    """Wall-clock of forward passes (no tape) on random frames; median and IQR."""
    if repeats < 3:
        raise ValueError("need at least 3 repeats for a median and IQR")
    from mrcfa.core.tensor import no_grad

    if dims is not None:
        cfg = cfg.replace(image_size=tuple(dims))
    model = MRCFA(cfg)
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    frames = [rng.random((3, h, w)) for _ in range(cfg.T)]
    with no_grad():
        model(frames)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(frames)
            samples.append(time.perf_counter() - t0)
    q = statistics.quantiles(samples, n=4) if len(samples) >= 2 else [samples[0]] * 3
    return RuntimeStats(statistics.median(samples), q[2] - q[0], samples, cost_affinity_path(cfg).total_flops)
