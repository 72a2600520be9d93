import numpy as np
import pytest

import oracles
from mrcfa.affinity import TokenMask, binary_mask_generation
from mrcfa.core import DimensionError, Tensor, precision
from mrcfa.decoder import (
    AffinityDecoder,
    ConvStack,
    feature_retrieval,
    merge_target,
    reference_feature_prepare,
)


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


def permuted(aff, dims):
    """[H*W x S] -> [S x H x W] by explicit indexing."""
    h, w = dims
    s = aff.shape[1]
    out = np.zeros((s, h, w))
    for y in range(h):
        for x in range(w):
            out[:, y, x] = aff[y * w + x]
    return out


def stack_oracle(stack: ConvStack, x):
    for i, conv in enumerate(stack.layers):
        if i:
            x = np.maximum(x, 0)
        x = oracles.conv2d(x, conv.weight.data, (1, 1), (1, 1), conv.bias.data)
    return x


def maa_oracle(dec: AffinityDecoder, refined):
    """B^L = A^L; B^l = G_l(up(B^{l+1}) + A^l), written as plain recursion."""

    def b(level):
        if level == len(refined) - 1:
            return refined[level]
        up = b(level + 1)
        h, w = refined[level].shape[1:]
        if up.shape[1:] != (h, w):
            up = oracles.bilinear(up, h, w)
        return stack_oracle(dec.aggregate[level], up + refined[level])

    return b(0)


DIMS = [(8, 8), (4, 4), (2, 2)]


def random_affs(rng, s, dims=DIMS):
    return [Tensor(rng.standard_normal((h * w, s))) for h, w in dims]


class TestSar:
    def test_zero_kernels(self):
        dec = AffinityDecoder(3, 1, np.random.default_rng(0))
        for conv in dec.refine[0].layers:
            conv.weight.data[:] = 0
            conv.bias.data[:] = 0
        out = dec.sar_refine(Tensor(np.ones((16, 3))), (4, 4), 0)
        assert out.shape == (3, 4, 4) and not out.data.any()

    def test_identity_stack(self):
        dec = AffinityDecoder(3, 1, np.random.default_rng(0))
        dec.make_identity()
        aff = np.random.default_rng(1).random((12, 3))
        np.testing.assert_array_equal(dec.sar_refine(Tensor(aff), (3, 4), 0).data, permuted(aff, (3, 4)))

    def test_conv_oracle(self):
        rng = np.random.default_rng(2)
        dec = AffinityDecoder(3, 1, rng)
        aff = rng.standard_normal((20, 3))
        expected = stack_oracle(dec.refine[0], permuted(aff, (4, 5)))
        np.testing.assert_allclose(dec.sar_refine(Tensor(aff), (4, 5), 0).data, expected, atol=1e-12)

    def test_extent_mismatch(self):
        dec = AffinityDecoder(3, 1, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            dec.sar_refine(Tensor(np.ones((15, 3))), (4, 4), 0)


class TestMaa:
    def test_single_scale_is_base_case(self):
        rng = np.random.default_rng(0)
        dec = AffinityDecoder(2, 1, rng)
        a = Tensor(rng.standard_normal((2, 4, 4)))
        assert dec.maa_aggregate([a]) is a

    def test_identity_equal_sizes_telescopes(self):
        rng = np.random.default_rng(1)
        dec = AffinityDecoder(3, 3, rng)
        dec.make_identity()
        refined = [Tensor(rng.standard_normal((3, 4, 4))) for _ in range(3)]
        out = dec.maa_aggregate(refined)
        np.testing.assert_allclose(out.data, sum(r.data for r in refined), atol=1e-15)

    def test_recursive_oracle(self):
        rng = np.random.default_rng(2)
        dec = AffinityDecoder(2, 3, rng)
        refined = [rng.standard_normal((2, h, w)) for h, w in DIMS]
        out = dec.maa_aggregate([Tensor(r) for r in refined])
        np.testing.assert_allclose(out.data, maa_oracle(dec, refined), atol=1e-10)

    def test_width_mismatch(self):
        dec = AffinityDecoder(2, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            dec.maa_aggregate([Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 2, 2)))])

    def test_width_preserved_end_to_end(self):
        rng = np.random.default_rng(3)
        dec = AffinityDecoder(5, 3, rng)
        b1 = dec(random_affs(rng, 5), DIMS)
        assert b1.shape == (5, 8, 8)

    def test_identity_decoder_is_sum_of_permuted(self):
        rng = np.random.default_rng(4)
        dec = AffinityDecoder(3, 3, rng)
        dec.make_identity()
        dims = [(4, 4)] * 3
        affs = random_affs(rng, 3, dims)
        out = dec(affs, dims)
        np.testing.assert_allclose(out.data, sum(permuted(a.data, (4, 4)) for a in affs), atol=1e-15)

    def test_parameters_not_shared(self):
        dec = AffinityDecoder(2, 3, np.random.default_rng(0))
        ids = [id(p) for p in dec.parameters()]
        assert len(ids) == len(set(ids)) == (3 + 2) * 2 * 2


class TestRetrieval:
    def test_one_hot_selects_rows(self):
        s, h, w = 3, 2, 2
        b = np.zeros((s, h, w))
        picks = [2, 0, 1, 2]
        for pos, j in enumerate(picks):
            b[j, pos // w, pos % w] = 1.0
        f = np.random.default_rng(0).random((s, 5))
        out = feature_retrieval(Tensor(b), Tensor(f))
        np.testing.assert_array_equal(out.data, f[picks])

    def test_zero_affinity(self):
        out = feature_retrieval(Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((2, 4))))
        assert out.shape == (9, 4) and not out.data.any()

    def test_oracle(self):
        rng = np.random.default_rng(1)
        b, f = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 6))
        flat = np.stack([b[:, y, x] for y in range(4) for x in range(4)])
        np.testing.assert_allclose(feature_retrieval(Tensor(b), Tensor(f)).data, oracles.matmul(flat, f), atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            feature_retrieval(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((2, 4))))


class TestReferencePrepare:
    def test_already_small_full_mask(self):
        f = np.random.default_rng(0).random((5, 2, 2))
        out = reference_feature_prepare(Tensor(f), TokenMask.full(4), (2, 2))
        np.testing.assert_array_equal(out.data, f.reshape(5, 4).T)

    def test_constant(self):
        mask = binary_mask_generation(np.random.default_rng(0).random((4, 4)), 1, 0.5)
        out = reference_feature_prepare(Tensor(np.full((3, 8, 8), 0.25)), mask, (2, 2))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)
        assert out.shape == (2, 3)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        f = rng.random((3, 8, 8))
        mask = binary_mask_generation(rng.random((4, 4)), 2, 0.5)
        small = oracles.bilinear(f, 2, 2).reshape(3, 4).T
        out = reference_feature_prepare(Tensor(f), mask, (2, 2))
        np.testing.assert_allclose(out.data, oracles.gather(small, mask.indices), atol=1e-12)


class TestMerge:
    def test_single_reference(self):
        rng = np.random.default_rng(0)
        o, f = rng.random((16, 3)), rng.random((3, 4, 4))
        out = merge_target([Tensor(o)], Tensor(f))
        np.testing.assert_allclose(out.data, permuted(o, (4, 4)) + f, atol=1e-15)

    def test_zero_outputs(self):
        f = np.random.default_rng(0).random((3, 4, 4))
        out = merge_target([Tensor(np.zeros((16, 3)))] * 2, Tensor(f))
        np.testing.assert_array_equal(out.data, f)

    def test_three_references_with_resize(self):
        rng = np.random.default_rng(1)
        os_ = [rng.random((4, 3)) for _ in range(3)]
        f = rng.random((3, 4, 4))
        out = merge_target([Tensor(o) for o in os_], Tensor(f), dims=(2, 2))
        avg = sum(os_) / 3
        expected = oracles.bilinear(permuted(avg, (2, 2)), 4, 4) + f
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            merge_target([], Tensor(np.ones((1, 2, 2))))
