"""
Layer building blocks: patch embedding, the ConvMixer layer (depthwise block with
residual, then a possibly grouped pointwise block with channel shuffle), batch
normalization and the linear classification head.

Each layer applies convolution, then ReLU, then batch normalization, in that
order.
"""
from __future__ import annotations

import math
from typing import Iterator, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, DimensionError


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def parameter(value: np.ndarray, name: str | None = None) -> Variable:
    return Variable(np.ascontiguousarray(value), requires_grad=True, name=name)


class Module:
    """Minimal container tracking parameters, buffers and train/eval mode.

    Parameters are ``Variable`` attributes with ``requires_grad``; buffers are
    the numpy arrays named in ``_buffer_names``. Sub-modules may be attributes
    or lists of modules. Iteration order is attribute definition order.
    """

    _buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Variable]]:
        for name, value in vars(self).items():
            if isinstance(value, Variable) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name in self._buffer_names:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        for p in self.parameters():
            p.astype(dtype)
        return self

    def __call__(self, x: Variable) -> Variable:
        return self.forward(x)

    def forward(self, x: Variable) -> Variable:
        raise NotImplementedError


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Variable) -> Variable:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class PatchEmbed(Module):
    """Non-overlapping p x p patches projected to ``embed_dim`` channels."""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        fan_in = in_channels * patch_size * patch_size
        self.weight = parameter(
            he_uniform(rng, (embed_dim, in_channels, patch_size, patch_size), fan_in, dtype)
        )
        self.bias = parameter(np.zeros(embed_dim, dtype=dtype))
        self.bn = BatchNorm2d(embed_dim, dtype=dtype)

    def forward(self, x: Variable) -> Variable:
        if x.value.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"patch embedding expects (N, {self.in_channels}, H, W), got {x.shape}"
            )
        h, w = x.shape[2:]
        p = self.patch_size
        if h % p or w % p:
            raise DimensionError(f"input size {h}x{w} is not divisible by patch size {p}")
        z = ad.conv2d(x, self.weight, self.bias, stride=p, padding=0)
        return self.bn(ad.relu(z))


class ConvMixerLayer(Module):
    """Depthwise block with residual followed by a (grouped) pointwise block.

    For ``groups > 1`` the pointwise output is channel-shuffled so that the next
    layer's grouped convolution sees channels from every group.
    """

    def __init__(self, dim: int, kernel_size: int, groups: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd to keep spatial size, got {kernel_size}")
        if groups < 1 or dim % groups:
            raise ConfigError(f"embedding width {dim} not divisible by groups {groups}")
        self.dim = dim
        self.kernel_size = kernel_size
        self.groups = groups
        self.shuffle = groups > 1
        self.dw_weight = parameter(he_uniform(rng, (dim, 1, kernel_size, kernel_size), kernel_size**2, dtype))
        self.dw_bias = parameter(np.zeros(dim, dtype=dtype))
        self.dw_bn = BatchNorm2d(dim, dtype=dtype)
        self.pw_weight = parameter(he_uniform(rng, (dim, dim // groups, 1, 1), dim // groups, dtype))
        self.pw_bias = parameter(np.zeros(dim, dtype=dtype))
        self.pw_bn = BatchNorm2d(dim, dtype=dtype)

    def depthwise(self, x: Variable) -> Variable:
        if x.value.ndim != 4 or x.shape[1] != self.dim:
            raise DimensionError(f"mixer layer expects (N, {self.dim}, H, W), got {x.shape}")
        pad = (self.kernel_size - 1) // 2
        z = ad.conv2d(x, self.dw_weight, self.dw_bias, padding=pad, groups=self.dim)
        return ad.add(self.dw_bn(ad.relu(z)), x)

    def pointwise(self, x: Variable) -> Variable:
        z = ad.conv2d(x, self.pw_weight, self.pw_bias, groups=self.groups)
        out = self.pw_bn(ad.relu(z))
        if self.shuffle:
            out = ad.channel_shuffle(out, self.groups)
        return out

    def forward(self, x: Variable) -> Variable:
        return self.pointwise(self.depthwise(x))


class LinearHead(Module):
    def __init__(self, in_features: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = parameter(he_uniform(rng, (num_classes, in_features), in_features, dtype))
        self.bias = parameter(np.zeros(num_classes, dtype=dtype))

    def forward(self, features: Variable) -> Variable:
        return ad.linear(features, self.weight, self.bias)


class GlobalAvgPool(Module):
    def forward(self, x: Variable) -> Variable:
        return ad.global_avg_pool(x)
