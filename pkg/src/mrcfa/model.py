"""End-to-end video segmentation model over a clip of reference frames plus a target."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from mrcfa.affinity import CrossFrameAffinity, TokenMask, selection_count
from mrcfa.core import ops
from mrcfa.core.nn import Module, PointwiseConv
from mrcfa.core.tensor import Tensor, no_grad, precision
from mrcfa.decoder import (
    AffinityDecoder,
    FeaturePyramidRetrieval,
    feature_retrieval,
    merge_target,
    reference_feature_prepare,
)
from mrcfa.encoder import Encoder, Fuse, FusedFeature, MultiScaleFeatures

IGNORE_INDEX = 255
MODES = ("mrcfa", "pyramid")


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    num_scales: int = 3
    reference_offsets: tuple[int, ...] = (-9, -6, -3)
    p: float = 0.5
    n_top: int = 4
    num_classes: int = 4
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (4, 8, 16)
    c_hat: int = 64
    decoder_depth: int = 2
    scaled_affinity: bool = False
    mode: str = "mrcfa"
    sar: bool = True
    maa: bool = True
    freeze_ref: bool = False
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.reference_offsets = tuple(int(v) for v in self.reference_offsets)
        self.channels = tuple(int(v) for v in self.channels)
        self.strides = tuple(int(v) for v in self.strides)
        offs = self.reference_offsets
        if any(o >= 0 for o in offs) or any(b <= a for a, b in zip(offs, offs[1:])):
            raise ValueError(f"reference offsets must be negative and strictly increasing, got {offs}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.num_scales <= len(self.channels):
            raise ValueError(f"num_scales={self.num_scales} outside [1, {len(self.channels)}]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def T(self) -> int:
        return len(self.reference_offsets) + 1

    def scale_dims(self) -> list[tuple[int, int]]:
        h, w = self.image_size
        return [(h // s, w // s) for s in self.strides[-self.num_scales :]]

    def used_channels(self) -> tuple[int, ...]:
        return self.channels[-self.num_scales :]

    def token_count(self) -> int:
        h, w = self.scale_dims()[-1]
        return h * w

    def width(self) -> int:
        return selection_count(self.p, self.token_count())

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = parse_value(kinds[key], raw)
        return cls(**kwargs)


def parse_value(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = str(kind)
    if kind.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


@dataclass
class FrameCache:
    """Everything the model derives from one frame on its own."""

    feats: MultiScaleFeatures
    fused: FusedFeature


@dataclass
class ForwardTrace:
    """Intermediate results of one forward pass, for inspection and tests."""

    masks: list[TokenMask] = field(default_factory=list)
    refined: list[Tensor] = field(default_factory=list)
    retrieved: list[Tensor] = field(default_factory=list)
    merged: Optional[Tensor] = None


class SegmentationHead(Module):
    def __init__(self, c_hat: int, num_classes: int, rng: np.random.Generator):
        self.proj = PointwiseConv(c_hat, num_classes, rng)

    def __call__(self, x: Tensor, size: tuple[int, int]) -> Tensor:
        return ops.bilinear_upsample(self.proj(x), size)


class MRCFA(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        with precision(cfg.precision):
            self.encoder = Encoder(rng, cfg.channels, cfg.strides, cfg.num_scales)
            self.encoder.check_input(*cfg.image_size)
            chans = cfg.used_channels()
            self.fuse = Fuse(chans, cfg.c_hat, rng)
            self.head = SegmentationHead(cfg.c_hat, cfg.num_classes, rng)
            dims = cfg.scale_dims()
            self.cfa = None
            self.decoder = None
            self.pyramid = None
            if cfg.T > 1:
                self.cfa = CrossFrameAffinity(chans, dims, rng, cfg.n_top, cfg.p, cfg.scaled_affinity)
                if cfg.mode == "mrcfa":
                    self.decoder = AffinityDecoder(
                        self.cfa.width, cfg.num_scales, rng, cfg.decoder_depth, cfg.sar, cfg.maa
                    )
                else:
                    self.pyramid = FeaturePyramidRetrieval(chans, cfg.c_hat, rng)

    def encode_frame(self, frame: Tensor, index: int = 0) -> FrameCache:
        with precision(self.cfg.precision):
            feats = self.encoder(_as_tensor(frame), index)
            return FrameCache(feats, self.fuse(feats))

    def forward_cached(
        self,
        target: FrameCache,
        references: Sequence[FrameCache],
        trace: Optional[ForwardTrace] = None,
        masks: Optional[Sequence[TokenMask]] = None,
    ) -> Tensor:
        """Logits [classes x H x W] for the target given already-encoded frames.

        ``masks`` replaces mask generation per reference (reference paths in tests).
        """
        cfg = self.cfg
        with precision(cfg.precision):
            if cfg.T == 1 or not references:
                base = target.fused.tensor
                if trace is not None:
                    trace.merged = base
                return self.head(base, cfg.image_size)
            dims = cfg.scale_dims()
            queries = self.cfa.project_queries(target.feats)
            outputs = []
            for i, ref in enumerate(references):
                stack = self.cfa(queries, ref.feats, None if masks is None else masks[i])
                if self.decoder is not None:
                    b1 = self.decoder(stack.affinities, dims)
                    tokens = reference_feature_prepare(ref.fused, stack.mask, dims[-1])
                    out = feature_retrieval(b1, tokens)
                    if trace is not None:
                        trace.refined.append(b1)
                else:
                    out = self.pyramid(stack.affinities, dims, ref.feats.scales, stack.mask)
                outputs.append(out)
                if trace is not None:
                    trace.masks.append(stack.mask)
                    trace.retrieved.append(out)
            merged = merge_target(outputs, target.fused, dims[0])
            if trace is not None:
                trace.merged = merged
            return self.head(merged, cfg.image_size)

    def __call__(self, frames: Sequence, trace: Optional[ForwardTrace] = None) -> Tensor:
        """Logits for the last frame of ``frames`` (references first, target last)."""
        cfg = self.cfg
        if len(frames) != cfg.T:
            raise ValueError(f"clip has {len(frames)} frames, model expects T={cfg.T}")
        shapes = {tuple(np.shape(_data(f))) for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"frames differ in shape: {sorted(shapes)}")
        target = self.encode_frame(frames[-1])
        if cfg.freeze_ref:
            with no_grad():
                refs = [self.encode_frame(f) for f in frames[:-1]]
        else:
            refs = [self.encode_frame(f) for f in frames[:-1]]
        return self.forward_cached(target, refs, trace)

    def predict(self, frames: Sequence) -> np.ndarray:
        with no_grad():
            return np.argmax(self(frames).data, axis=0).astype(np.int64)


def _data(f):
    return f.data if isinstance(f, Tensor) else f


def _as_tensor(f) -> Tensor:
    return f if isinstance(f, Tensor) else Tensor(f)


def segmentation_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel cross-entropy over non-ignored pixels."""
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ValueError(f"labels {labels.shape} do not match logits grid {(h, w)}")
    flat = ops.reshape(ops.permute(logits, (1, 2, 0)), (h * w, k))
    return ops.softmax_cross_entropy(flat, labels.reshape(-1), ignore_index)
