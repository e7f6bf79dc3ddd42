"""Module containers and the basic layers built on the tensor ops."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import nnops
from .optim import Param
from .tensor import Tensor, concat, relu


class Module:
    """Parameter container.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order, so parameter names and ordering are deterministic.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self) -> None:
        """Stamp each parameter with its dotted path (used in diagnostics)."""
        for name, p in self.named_parameters():
            p.name = name


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Param(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Param(uniform_init(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        depthwise: bool = False,
        bias: bool = True,
        zero_init: bool = False,
    ):
        if depthwise and c_in != c_out:
            raise ValueError("depthwise convolution keeps the channel count")
        if padding is None:
            if k % 2 == 0:
                raise ValueError(f"'same' padding needs an odd kernel, got {k}")
            padding = dilation * (k - 1) // 2
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.groups = c_in if depthwise else 1
        shape = (c_out, 1 if depthwise else c_in, k, k)
        fan_in = shape[1] * k * k
        self.weight = Param(np.zeros(shape) if zero_init else uniform_init(rng, shape, fan_in))
        if bias:
            self.bias = Param(np.zeros(c_out) if zero_init else uniform_init(rng, (c_out,), fan_in))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return nnops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class ConvTranspose2x2(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.weight = Param(uniform_init(rng, (c_in, c_out, 2, 2), c_out * 4))
        self.bias = Param(uniform_init(rng, (c_out,), c_out * 4))

    def forward(self, x: Tensor) -> Tensor:
        return nnops.conv_transpose2x2(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer norm over the last axis (token features)."""

    def __init__(self, dim: int):
        self.gain = Param(np.ones(dim))
        self.shift = Param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return nnops.layer_norm(x, self.gain, self.shift, axis=-1)


class ChannelNorm(Module):
    """Layer norm across the channel axis of an NCHW map, per pixel."""

    def __init__(self, channels: int):
        self.gain = Param(np.ones(channels))
        self.shift = Param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return nnops.layer_norm(x, self.gain, self.shift, axis=1)


class DeformConv2d(Module):
    """3×3 deformable convolution whose offsets come from a zero-initialised
    plain 3×3 convolution over the same input."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3):
        self.k = k
        self.offset_conv = Conv2d(rng, c_in, 2 * k * k, k, zero_init=True)
        self.weight = Param(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Param(uniform_init(rng, (c_out,), c_in * k * k))

    def forward(self, x: Tensor) -> Tensor:
        offsets = self.offset_conv(x)
        return nnops.deformable_conv2d(x, self.weight, offsets, self.bias)


class ResBlock(Module):
    """Two 3×3 convs with channel norm; 1×1 projection on the skip when the
    width changes."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3)
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)
        self.norm2 = ChannelNorm(c_out)
        self.skip = Conv2d(rng, c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = self.skip(x) if self.skip is not None else x
        return relu(h + s)


def channel_concat(parts: list[Tensor]) -> Tensor:
    return concat(parts, axis=1)
