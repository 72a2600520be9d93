"""Parameters, modules and the few layers the model is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from mrcfa.core import ops
from mrcfa.core.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Container that discovers Parameters and sub-Modules among its attributes.

    Lists and tuples of modules are walked too. Names are dotted attribute
    paths, e.g. ``encoder.stages.0.conv.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ValueError(f"parameter {name} registered twice")
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            yield from _walk_value(val, prefix + key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _walk_value(val, name: str):
    if isinstance(val, Parameter):
        if not val.name:
            val.name = name
        yield name, val
    elif isinstance(val, Module):
        yield from val._walk(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_value(item, f"{name}.{i}")


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size,
        rng: np.random.Generator,
        stride=1,
        padding=0,
        bias: bool = True,
    ):
        kh, kw = ops._pair(kernel_size)
        fan_in = c_in * kh * kw
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kh, kw), fan_in))
        self.bias: Optional[Parameter] = Parameter(uniform_init(rng, (c_out,), fan_in)) if bias else None
        self.stride = ops._pair(stride)
        self.padding = ops._pair(padding)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """Bias-free token-wise projection, ``x [N x C_in] @ W [C_in x C_out]``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, (c_in, c_out), c_in))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight)


class PointwiseConv(Module):
    """1x1 convolution on [C x H x W] maps, expressed as a token-wise linear map."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.conv = Conv2d(c_in, c_out, 1, rng, bias=bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


def set_dirac(conv: Conv2d) -> None:
    """Make ``conv`` an exact channel-wise identity (requires C_in == C_out, odd kernel)."""
    c_out, c_in, kh, kw = conv.weight.shape
    if c_in != c_out:
        raise ValueError("identity kernel needs C_in == C_out")
    w = np.zeros(conv.weight.shape, dtype=conv.weight.data.dtype)
    for c in range(c_out):
        w[c, c, kh // 2, kw // 2] = 1.0
    conv.weight.data = w
    if conv.bias is not None:
        conv.bias.data = np.zeros_like(conv.bias.data)
