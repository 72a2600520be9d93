"""Cross-frame affinities and selective token masking.

Affinities are laid out as [query tokens x key tokens]: rows index positions
of the target frame, columns index (selected) positions of the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mrcfa.core import ops
from mrcfa.core.nn import Conv2d, Linear, Module
from mrcfa.core.tensor import DimensionError, Tensor
from mrcfa.encoder import MultiScaleFeatures


def selection_count(p: float, tokens: int) -> int:
    """``S = floor(p * tokens)``, at least 1. Rounded first so 0.57 * 100 gives 57."""
    if not 0 < p <= 1:
        raise ValueError(f"token ratio p={p} outside (0, 1]")
    return max(1, math.floor(round(p * tokens, 9)))


@dataclass
class TokenMask:
    importance: np.ndarray  # M, length H_L*W_L
    selected: np.ndarray  # boolean, length H_L*W_L
    indices: np.ndarray  # ascending positions of the S selected tokens
    ratio: float

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @classmethod
    def full(cls, tokens: int) -> "TokenMask":
        return cls(np.zeros(tokens), np.ones(tokens, dtype=bool), np.arange(tokens), 1.0)


@dataclass
class AffinityStack:
    affinities: list[Tensor]  # l = 1..L, each [H_l*W_l x S]
    mask: TokenMask
    n_top: int
    dims: list[tuple[int, int]]

    def __post_init__(self):
        widths = {a.shape[1] for a in self.affinities}
        if len(widths) != 1:
            raise DimensionError(f"affinity widths differ across scales: {sorted(widths)}")

    @property
    def width(self) -> int:
        return self.affinities[0].shape[1]


def flatten_tokens(x: Tensor) -> Tensor:
    """[C x H x W] -> [H*W x C]."""
    c, h, w = x.shape
    return ops.reshape(ops.permute(x, (1, 2, 0)), (h * w, c))


def unflatten_tokens(x: Tensor, dims: tuple[int, int]) -> Tensor:
    """[H*W x C] -> [C x H x W]."""
    h, w = dims
    if x.shape[0] != h * w:
        raise DimensionError(f"{x.shape[0]} tokens cannot form a {h}x{w} grid")
    return ops.permute(ops.reshape(x, (h, w, x.shape[1])), (2, 0, 1))


def compute_affinity(q: Tensor, k: Tensor, scale: float = 1.0) -> Tensor:
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"affinity: channel mismatch between queries {q.shape} and keys {k.shape}")
    a = ops.row_dots(q, k)
    return a if scale == 1.0 else ops.scale(a, scale)


def binary_mask_generation(affinity: np.ndarray | Tensor, n: int, p: float) -> TokenMask:
    """Token importance = sum of the ``n`` largest entries of each column; keep the top ``p``."""
    a = affinity.data if isinstance(affinity, Tensor) else np.asarray(affinity)
    if a.ndim != 2:
        raise DimensionError(f"mask generation expects a matrix, got {a.shape}")
    m, tokens = a.shape
    if not 1 <= n <= m:
        raise ValueError(f"top-n count n={n} outside [1, {m}]")
    rows = ops.topk_rows(a, n)
    importance = np.take_along_axis(a, rows, axis=0).sum(axis=0)
    s = selection_count(p, tokens)
    order = np.argsort(-importance, kind="stable")
    indices = np.sort(order[:s])
    selected = np.zeros(tokens, dtype=bool)
    selected[indices] = True
    return TokenMask(importance, selected, indices, p)


def select_tokens(x: Tensor, mask: TokenMask) -> Tensor:
    if x.shape[0] != mask.selected.size:
        raise DimensionError(f"select_tokens: {x.shape[0]} tokens vs mask of length {mask.selected.size}")
    return ops.gather_rows(x, mask.indices)


class KeyDownsample(Module):
    """Convolution with kernel = stride = (H_l/H_L, W_l/W_L), no bias."""

    def __init__(self, channels: int, factor: tuple[int, int], rng: np.random.Generator):
        self.factor = factor
        self.conv = Conv2d(channels, channels, factor, rng, stride=factor, bias=False)

    def __call__(self, keys: Tensor, src_dims: tuple[int, int]) -> Tensor:
        return flatten_tokens(self.conv(unflatten_tokens(keys, src_dims)))


def downsample_factor(src: tuple[int, int], dst: tuple[int, int], level: int) -> tuple[int, int]:
    if src[0] % dst[0] or src[1] % dst[1]:
        raise DimensionError(f"scale {level + 1} ({src[0]}x{src[1]}) is not divisible by the deepest grid {dst[0]}x{dst[1]}")
    return src[0] // dst[0], src[1] // dst[1]


class CrossFrameAffinity(Module):
    """Query/key projections, key downsampling and masked affinity construction."""

    def __init__(
        self,
        channels: Sequence[int],
        dims: Sequence[tuple[int, int]],
        rng: np.random.Generator,
        n_top: int = 4,
        p: float = 0.5,
        scaled: bool = False,
    ):
        self.channels = tuple(channels)
        self.dims = [tuple(d) for d in dims]
        self.n_top = int(n_top)
        self.p = float(p)
        self.scaled = scaled
        deepest = self.dims[-1]
        self.tokens = deepest[0] * deepest[1]
        if not 1 <= self.n_top <= self.tokens:
            raise ValueError(f"top-n count n={self.n_top} outside [1, {self.tokens}]")
        self.width = selection_count(self.p, self.tokens)
        self.query = [Linear(c, c, rng) for c in self.channels]
        self.key = [Linear(c, c, rng) for c in self.channels]
        self.down = [
            KeyDownsample(c, downsample_factor(d, deepest, i), rng)
            for i, (c, d) in enumerate(zip(self.channels[:-1], self.dims[:-1]))
        ]

    def scale_for(self, level: int) -> float:
        return 1.0 / math.sqrt(self.channels[level]) if self.scaled else 1.0

    def project_queries(self, feats: MultiScaleFeatures) -> list[Tensor]:
        return [lin(flatten_tokens(f)) for lin, f in zip(self.query, feats.scales)]

    def project_keys(self, feats: MultiScaleFeatures) -> list[Tensor]:
        return [lin(flatten_tokens(f)) for lin, f in zip(self.key, feats.scales)]

    def downsample_keys(self, keys: list[Tensor]) -> list[Tensor]:
        """Keys of the shallower scales brought to the deepest grid; the deepest passes through."""
        out = [down(k, d) for down, k, d in zip(self.down, keys[:-1], self.dims[:-1])]
        return out + [keys[-1]]

    def __call__(
        self,
        queries: list[Tensor],
        reference: MultiScaleFeatures,
        mask: Optional[TokenMask] = None,
    ) -> AffinityStack:
        """Build the masked affinity stack against one reference frame.

        ``queries`` come from ``project_queries`` on the target and can be
        shared across references. ``mask`` overrides mask generation (used to
        compare against an unmasked path).
        """
        keys = self.project_keys(reference)
        last = len(self.channels) - 1
        full = compute_affinity(queries[last], keys[last], self.scale_for(last))
        if mask is None:
            mask = binary_mask_generation(full, self.n_top, self.p)
        hat = self.downsample_keys(keys)
        affs = []
        for level in range(last):
            sel = select_tokens(hat[level], mask)
            affs.append(compute_affinity(queries[level], sel, self.scale_for(level)))
        affs.append(ops.gather_cols(full, mask.indices))
        return AffinityStack(affs, mask, self.n_top, list(self.dims))

    def build_affinity_stack(
        self, target: MultiScaleFeatures, reference: MultiScaleFeatures
    ) -> AffinityStack:
        return self(self.project_queries(target), reference)
