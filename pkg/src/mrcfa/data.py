"""Synthetic moving-shapes videos and their on-disk layout.

Layout::

    dataset/
      manifest.txt            video_id<TAB>frame_count, one video per line
      dataset.cfg             key=value: num_classes, size, seed
      <video_id>/frame_0000.tns, mask_0000.msk, ...
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mrcfa.io import load_mask, load_tensors, save_mask, save_tensors

IGNORE_INDEX = 255

# class 0 is background; foreground colours are spread over RGB
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.90],
        [0.90, 0.80, 0.20],
        [0.75, 0.30, 0.80],
        [0.20, 0.80, 0.85],
        [0.95, 0.55, 0.15],
    ]
)


@dataclass
class ShapeSpec:
    cls: int
    size: tuple[int, int]  # (h, w)
    start: tuple[float, float]  # top-left (y, x)
    velocity: tuple[float, float]  # pixels per frame
    kind: str = "rect"  # "rect" or "disc"
    noise: float = 0.05

    def position(self, t: int) -> tuple[int, int]:
        return (
            int(round(self.start[0] + self.velocity[0] * t)),
            int(round(self.start[1] + self.velocity[1] * t)),
        )


@dataclass
class SceneSpec:
    """One video. Shapes are drawn in list order, later ones on top."""

    seed: int
    size: tuple[int, int]
    shapes: list[ShapeSpec]
    background_noise: float = 0.05
    flicker: float = 0.0  # probability a frame is corrupted
    flicker_noise: float = 0.0  # extra noise amplitude on corrupted frames

    def check(self, frames: int) -> None:
        h, w = self.size
        for i, s in enumerate(self.shapes):
            sh, sw = s.size
            if sh > h or sw > w or sh < 1 or sw < 1:
                raise ValueError(f"shape {i} of size {s.size} does not fit a {h}x{w} canvas")
            for t in (0, frames - 1):
                y, x = s.position(t)
                if y + sh <= 0 or x + sw <= 0 or y >= h or x >= w:
                    raise ValueError(f"shape {i} leaves the canvas by frame {t}")


@dataclass
class VideoClip:
    frames: list[np.ndarray]  # [3 x H x W] float32 in [0, 1]
    labels: list[np.ndarray]  # [H x W] uint8
    video_id: str = "video"
    frame_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError(f"{len(self.frames)} frames but {len(self.labels)} label masks")
        if not self.frame_indices:
            self.frame_indices = list(range(len(self.frames)))

    def __len__(self) -> int:
        return len(self.frames)

    def clip_at(self, target: int, offsets: Sequence[int]) -> list[np.ndarray]:
        """Reference frames at ``target + offset`` (clamped to the first frame), then the target."""
        idx = [max(0, target + o) for o in offsets] + [target]
        return [self.frames[i] for i in idx]


def _shape_mask(shape: ShapeSpec, t: int, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    y, x = shape.position(t)
    sh, sw = shape.size
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (yy >= y) & (yy < y + sh) & (xx >= x) & (xx < x + sw)
    if shape.kind == "disc":
        cy, cx = y + (sh - 1) / 2, x + (sw - 1) / 2
        inside &= ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
    return inside


def render_labels(spec: SceneSpec, t: int) -> np.ndarray:
    labels = np.zeros(spec.size, dtype=np.uint8)
    for shape in spec.shapes:
        labels[_shape_mask(shape, t, spec.size)] = shape.cls
    return labels


def generate(spec: SceneSpec, frames: int, video_id: Optional[str] = None) -> VideoClip:
    """Render ``frames`` frames of the scene. Deterministic in ``spec.seed``."""
    if frames < 1:
        raise ValueError("need at least one frame")
    spec.check(frames)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    imgs, labs = [], []
    for t in range(frames):
        img = PALETTE[0][:, None, None] + spec.background_noise * rng.standard_normal((3, h, w))
        labels = np.zeros((h, w), dtype=np.uint8)
        for shape in spec.shapes:
            m = _shape_mask(shape, t, spec.size)
            colour = PALETTE[shape.cls % len(PALETTE)][:, None, None]
            tex = colour + shape.noise * rng.standard_normal((3, h, w))
            img = np.where(m[None], tex, img)
            labels[m] = shape.cls
        if spec.flicker > 0 and rng.random() < spec.flicker:
            img = img + spec.flicker_noise * rng.standard_normal((3, h, w))
        imgs.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        labs.append(labels)
    return VideoClip(imgs, labs, video_id or f"video_{spec.seed}", list(range(frames)))


def random_scene(
    seed: int,
    size: int | tuple[int, int] = 32,
    num_classes: int = 4,
    frames: int = 12,
    shape_count: Optional[int] = None,
    noise: float = 0.05,
    max_speed: float = 1.0,
    flicker: float = 0.0,
    flicker_noise: float = 0.0,
) -> SceneSpec:
    """Random scene where every foreground class appears at least once."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    fg = num_classes - 1
    if fg < 1:
        raise ValueError("need at least one foreground class")
    count = fg if shape_count is None else max(shape_count, fg)
    classes = list(rng.permutation(np.arange(1, num_classes))) + list(rng.integers(1, num_classes, count - fg))
    shapes = []
    for cls in classes:
        sh, sw = (int(v) for v in rng.integers(max(2, h // 6), max(3, h // 3) + 1, 2))
        vy, vx = (float(v) for v in rng.uniform(-max_speed, max_speed, 2))
        span = frames - 1
        # choose a start that keeps the whole shape on canvas for every frame
        y0 = _start(rng, h - sh, vy * span)
        x0 = _start(rng, w - sw, vx * span)
        kind = "disc" if rng.random() < 0.5 else "rect"
        shapes.append(ShapeSpec(int(cls), (sh, sw), (y0, x0), (vy, vx), kind, noise))
    return SceneSpec(int(seed), (h, w), shapes, noise, flicker, flicker_noise)


def _start(rng: np.random.Generator, room: int, travel: float) -> float:
    lo, hi = max(0.0, -travel), min(float(room), room - travel)
    if hi < lo:
        return float(room) / 2 - travel / 2
    return float(rng.uniform(lo, hi))


def make_dataset(
    seed: int,
    videos: int,
    frames: int = 12,
    size: int = 32,
    num_classes: int = 4,
    **scene_kw,
) -> list[VideoClip]:
    clips = []
    for v in range(videos):
        spec = random_scene(seed * 100_003 + v, size, num_classes, frames, **scene_kw)
        clips.append(generate(spec, frames, video_id=f"v{v:03d}"))
    return clips


def save_clip(directory, clip: VideoClip) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(zip(clip.frames, clip.labels)):
        save_tensors(d / f"frame_{i:04d}.tns", {"frame": img})
        save_mask(d / f"mask_{i:04d}.msk", lab)


def load_clip(directory, frames: Optional[int] = None) -> VideoClip:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no clip directory at {d}")
    if frames is None:
        frames = len(sorted(d.glob("frame_*.tns")))
    if frames == 0:
        raise FileNotFoundError(f"no frames in {d}")
    imgs, labs = [], []
    for i in range(frames):
        fpath, mpath = d / f"frame_{i:04d}.tns", d / f"mask_{i:04d}.msk"
        if not fpath.exists() or not mpath.exists():
            raise FileNotFoundError(f"missing frame or mask {i} in {d}")
        imgs.append(load_tensors(fpath)["frame"])
        labs.append(load_mask(mpath))
    return VideoClip(imgs, labs, d.name, list(range(frames)))


def save_dataset(root, clips: Sequence[VideoClip], meta: Optional[dict] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_clip(root / clip.video_id, clip)
    lines = [f"{c.video_id}\t{len(c)}" for c in clips]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    if meta:
        (root / "dataset.cfg").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_manifest(root) -> list[tuple[str, int]]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        vid, count = line.split("\t")
        out.append((vid, int(count)))
    return out


def read_meta(root) -> dict[str, str]:
    path = Path(root) / "dataset.cfg"
    if not path.exists():
        return {}
    return parse_key_values(path.read_text())


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {i}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(root) -> list[VideoClip]:
    return [load_clip(Path(root) / vid, count) for vid, count in read_manifest(root)]


def dataset_num_classes(root, clips: Optional[Sequence[VideoClip]] = None) -> int:
    meta = read_meta(root)
    if "num_classes" in meta:
        return int(meta["num_classes"])
    clips = clips if clips is not None else load_dataset(root)
    top = max(int(l[l != IGNORE_INDEX].max(initial=0)) for c in clips for l in c.labels)
    return top + 1


def is_empty_dir(path) -> bool:
    return not os.path.exists(path) or not any(os.scandir(path))
