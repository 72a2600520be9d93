"""Differentiable primitives.

No broadcasting anywhere: operands must agree exactly in shape unless an op
documents otherwise.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mrcfa.core.tensor import DimensionError, Tensor, get_dtype, make_result, send


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        send(a, g)
        send(b, g)

    return make_result(a.data + b.data, (a, b), bw, "add")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("add_n: empty input")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {x.shape} differ")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data

    def bw(g):
        for x in xs:
            send(x, g)

    return make_result(out, tuple(xs), bw, "add_n")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        send(a, g * c)

    return make_result(a.data * c, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        send(a, g * mask)

    return make_result(a.data * mask, (a,), bw, "relu")


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        send(a, np.full(a.shape, g.reshape(()), dtype=a.data.dtype))

    return make_result(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over one axis, or over everything when ``axis`` is None."""
    if axis is None:
        n = a.data.size

        def bw_all(g):
            send(a, np.full(a.shape, g.reshape(()) / n, dtype=a.data.dtype))

        return make_result(np.asarray(a.data.mean()), (a,), bw_all, "mean")
    ax = axis % a.ndim
    n = a.shape[ax]

    def bw(g):
        send(a, np.broadcast_to(np.expand_dims(g, ax) / n, a.shape))

    return make_result(a.data.mean(axis=ax), (a,), bw, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def bw(g):
        send(a, g.reshape(a.shape))

    return make_result(a.data.reshape(shape), (a,), bw, "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))

    def bw(g):
        send(a, g.transpose(inv))

    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "permute")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return permute(a, (1, 0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")

    def bw(g):
        if a.requires_grad:
            send(a, g @ b.data.T)
        if b.requires_grad:
            send(b, a.data.T @ g)

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def row_dots(q: Tensor, k: Tensor) -> Tensor:
    """``q @ k.T`` with every entry summed over channels in index order.

    BLAS picks kernels by matrix shape, so the same dot product can round
    differently inside differently sized products. Here each entry depends
    only on its two rows, which makes taking columns of the result identical,
    bit for bit, to multiplying by the same rows of ``k``.
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"row_dots: channel mismatch between {q.shape} and {k.shape}")
    qd, kd = q.data, k.data
    out = qd[:, :1] * kd[:, 0]
    for c in range(1, qd.shape[1]):
        out += qd[:, c : c + 1] * kd[:, c]

    def bw(g):
        if q.requires_grad:
            send(q, g @ kd)
        if k.requires_grad:
            send(k, g.T @ qd)

    return make_result(out, (q, k), bw, "row_dots")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Row-wise linear map ``x @ weight`` for ``x`` of shape [N x C_in]."""
    return matmul(x, weight)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("gather_rows: indices must be a non-empty 1-D list")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise DimensionError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        send(x, full)

    return make_result(x.data[idx], (x,), bw, "gather_rows")


def gather_cols(x: Tensor, indices: Sequence[int]) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"gather_cols: expected a matrix, got {x.shape}")
    return transpose(gather_rows(transpose(x), indices))


def topk_per_column(a: Tensor, n: int) -> Tensor:
    """Largest ``n`` entries of each column, descending; ties go to the lower row.

    The chosen positions are constants for the backward pass.
    """
    if a.ndim != 2:
        raise DimensionError(f"topk_per_column: expected a matrix, got {a.shape}")
    m = a.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"topk_per_column: n={n} outside [1, {m}]")
    rows = topk_rows(a.data, n)
    cols = np.broadcast_to(np.arange(a.shape[1]), rows.shape)
    out = a.data[rows, cols]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        send(a, full)

    return make_result(out, (a,), bw, "topk")


def topk_rows(values: np.ndarray, n: int) -> np.ndarray:
    """Row indices of the ``n`` largest entries per column (stable descending)."""
    order = np.argsort(-values, axis=0, kind="stable")
    return order[:n]


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
) -> Tensor:
    """Cross-correlation of ``x`` [C_in x H x W] with ``kernel`` [C_out x C_in x kh x kw].

    Zero padding; ``bias`` (optional) has shape [C_out].
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] input and 4-D kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: kernel {kernel.shape} expects {kc} channels, input {x.shape} has {c_in}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"conv2d: strides must be positive, got {(sh, sw)}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(w, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # cols: [C_in, ho, wo, kh, kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols2 = np.ascontiguousarray(cols.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, -1)
    out = (cols2 @ wmat.T).T.reshape(c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        if kernel.requires_grad:
            send(kernel, (g2 @ cols2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            send(bias, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += gcols[:, i, j]
            send(x, gxp[:, ph : ph + h, pw : pw + w])

    return make_result(out, parents, bw, "conv2d")


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """[dst x src] half-pixel-centre linear interpolation weights along one axis."""
    mat = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        u = (i + 0.5) * src / dst - 0.5
        u = min(max(u, 0.0), src - 1.0)
        i0 = int(np.floor(u))
        i1 = min(i0 + 1, src - 1)
        frac = u - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def bilinear_resize(x: Tensor, target: Sequence[int]) -> Tensor:
    """Half-pixel-centre bilinear resize of [C x H x W] to [C x H2 x W2], either direction."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize: expected [C,H,W], got {x.shape}")
    _, h, w = x.shape
    h2, w2 = _pair(target)
    if h2 <= 0 or w2 <= 0:
        raise DimensionError(f"bilinear_resize: invalid target {(h2, w2)}")
    if (h2, w2) == (h, w):
        return reshape(x, x.shape)
    rh = interp_matrix(h, h2).astype(get_dtype())
    rw = interp_matrix(w, w2).astype(get_dtype())
    out = np.einsum("ih,chw,jw->cij", rh, x.data, rw, optimize=True)

    def bw(g):
        send(x, np.einsum("ih,cij,jw->chw", rh, g, rw, optimize=True))

    return make_result(out, (x,), bw, "resize")


def bilinear_upsample(x: Tensor, target: Sequence[int]) -> Tensor:
    """Enlarging-only bilinear resize."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample: expected [C,H,W], got {x.shape}")
    h2, w2 = _pair(target)
    if h2 < x.shape[1] or w2 < x.shape[2]:
        raise DimensionError(f"bilinear_upsample: target {(h2, w2)} smaller than input {x.shape[1:]}")
    return bilinear_resize(x, (h2, w2))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean cross-entropy of ``logits`` [N x K] against integer ``labels`` [N]."""
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.size} labels")
    keep = np.ones(labels.size, dtype=bool) if ignore_index is None else labels != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every label is ignored")
    k = logits.shape[1]
    lab = labels[keep].astype(np.intp)
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")
    z = logits.data[keep]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(count), lab]
    loss = nll.mean()

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(count), lab] -= 1.0
        full = np.zeros_like(logits.data)
        full[keep] = p * (g.reshape(()) / count)
        send(logits, full)

    return make_result(np.asarray(loss), (logits,), bw, "cross_entropy")
