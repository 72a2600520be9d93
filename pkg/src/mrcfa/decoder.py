"""Affinity decoder: per-scale refinement, coarse-to-fine aggregation, retrieval."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from mrcfa.affinity import TokenMask, flatten_tokens, select_tokens, unflatten_tokens
from mrcfa.core import ops
from mrcfa.core.nn import Conv2d, Module, PointwiseConv, set_dirac
from mrcfa.core.tensor import DimensionError, Tensor
from mrcfa.encoder import FusedFeature


class ConvStack(Module):
    """Channel-preserving 3x3 convolutions, relu between layers (not after the last)."""

    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 2):
        if depth < 1:
            raise ValueError("conv stack depth must be >= 1")
        self.layers = [Conv2d(channels, channels, 3, rng, padding=1) for _ in range(depth)]
        # Affinity values are small at init, so a random bias would decide
        # alone whether a narrow stack's relu units are alive.
        for conv in self.layers:
            conv.bias.data[:] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.layers):
            if i:
                x = ops.relu(x)
            x = conv(x)
        return x

    def make_identity(self) -> None:
        """Test configuration: a single Dirac layer."""
        self.layers = self.layers[:1]
        set_dirac(self.layers[0])


def permute_affinity(aff: Tensor, dims: tuple[int, int]) -> Tensor:
    """[H*W x S] -> [S x H x W]."""
    return unflatten_tokens(aff, dims)


def upsample_if_needed(x: Tensor, dims: tuple[int, int]) -> Tensor:
    if x.shape[1:] == tuple(dims):
        return x
    return ops.bilinear_upsample(x, dims)


class AffinityDecoder(Module):
    """Refine each scale, then fold scales together from deepest to shallowest.

    ``refine`` holds one stack per scale; ``aggregate`` one per fusion level
    l < L. Parameters are not shared between any two stacks.
    """

    def __init__(
        self,
        width: int,
        num_scales: int,
        rng: np.random.Generator,
        depth: int = 2,
        sar: bool = True,
        maa: bool = True,
    ):
        self.width = width
        self.num_scales = num_scales
        self.use_sar = sar
        self.use_maa = maa
        self.refine = [ConvStack(width, rng, depth) for _ in range(num_scales)] if sar else []
        self.aggregate = [ConvStack(width, rng, depth) for _ in range(num_scales - 1)] if maa else []

    def make_identity(self) -> None:
        for stack in self.refine + self.aggregate:
            stack.make_identity()

    def sar_refine(self, aff: Tensor, dims: tuple[int, int], level: int) -> Tensor:
        if aff.ndim != 2 or aff.shape[0] != dims[0] * dims[1]:
            raise DimensionError(f"SAR at scale {level + 1}: affinity {aff.shape} does not match grid {dims}")
        x = permute_affinity(aff, dims)
        return self.refine[level](x) if self.use_sar else x

    def maa_aggregate(self, refined: Sequence[Tensor]) -> Tensor:
        widths = {r.shape[0] for r in refined}
        if len(widths) != 1:
            raise DimensionError(f"MAA: affinity widths differ across scales: {sorted(widths)}")
        b = refined[-1]
        for level in range(len(refined) - 2, -1, -1):
            a = refined[level]
            merged = ops.add(upsample_if_needed(b, a.shape[1:]), a)
            b = self.aggregate[level](merged) if self.use_maa else merged
        return b

    def __call__(self, affinities: Sequence[Tensor], dims: Sequence[tuple[int, int]]) -> Tensor:
        if len(affinities) != self.num_scales:
            raise DimensionError(f"decoder expects {self.num_scales} scales, got {len(affinities)}")
        refined = [self.sar_refine(a, d, i) for i, (a, d) in enumerate(zip(affinities, dims))]
        return self.maa_aggregate(refined)


def feature_retrieval(b1: Tensor, ref_tokens: Tensor) -> Tensor:
    """``O = B1 x F_tilde`` with B1 permuted from [S x H x W] to [H*W x S]."""
    if b1.ndim != 3 or ref_tokens.ndim != 2 or b1.shape[0] != ref_tokens.shape[0]:
        raise DimensionError(f"retrieval: affinity {b1.shape} vs reference tokens {ref_tokens.shape}")
    return ops.matmul(flatten_tokens(b1), ref_tokens)


def reference_feature_prepare(fused: FusedFeature | Tensor, mask: TokenMask, grid: tuple[int, int]) -> Tensor:
    """Resize the reference's fused feature to the deepest grid, flatten, keep selected tokens."""
    f = fused.tensor if isinstance(fused, FusedFeature) else fused
    small = ops.bilinear_resize(f, grid)
    return select_tokens(flatten_tokens(small), mask)


def merge_target(
    outputs: Sequence[Tensor],
    fused_target: FusedFeature | Tensor,
    dims: Optional[tuple[int, int]] = None,
) -> Tensor:
    """Average the per-reference outputs, bring them to the fused grid and add the target feature.

    ``dims`` is the grid of the retrieved tokens; it defaults to the fused grid.
    """
    if not outputs:
        raise ValueError("merge_target needs at least one reference output")
    f = fused_target.tensor if isinstance(fused_target, FusedFeature) else fused_target
    c_hat, h, w = f.shape
    side = (h, w) if dims is None else tuple(dims)
    avg = ops.scale(ops.add_n(list(outputs)), 1.0 / len(outputs))
    if avg.shape[1] != c_hat:
        raise DimensionError(f"merge: retrieved channels {avg.shape[1]} != fused channels {c_hat}")
    grid = unflatten_tokens(avg, side)
    return ops.add(upsample_if_needed(grid, (h, w)), f)


class FeaturePyramidRetrieval(Module):
    """Comparison mode without the affinity decoder.

    At every scale the masked affinity retrieves that scale's reference
    features directly; the per-scale results are projected to ``C_hat``,
    upsampled to the shallowest grid and summed.
    """

    def __init__(self, channels: Sequence[int], c_hat: int, rng: np.random.Generator):
        self.proj = [PointwiseConv(c, c_hat, rng) for c in channels]

    def __call__(self, affinities, dims, ref_scales: Sequence[Tensor], mask: TokenMask) -> Tensor:
        grid = dims[-1]
        parts = []
        for aff, d, f, proj in zip(affinities, dims, ref_scales, self.proj):
            values = select_tokens(flatten_tokens(ops.bilinear_resize(f, grid)), mask)
            o = unflatten_tokens(ops.matmul(aff, values), d)
            parts.append(upsample_if_needed(proj(o), dims[0]))
        return flatten_tokens(ops.add_n(parts))
