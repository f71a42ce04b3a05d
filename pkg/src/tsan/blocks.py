"""Composite network blocks: asymmetric convolution, squeeze-excitation, and
the multi-scale densely connected encoder.

Each encoder layer pools every earlier feature map (including the raw input)
down to its own scale, concatenates them along channels, and applies
[asymmetric conv -> batch norm -> elu] twice, channel gating, and a stride-2
max pool. Layer i therefore halves the resolution and doubles the channel
count: layer i emits 2^i * n_ini channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .exceptions import ConfigurationError


@dataclass(frozen=True)
class ScaledDenseConfig:
    n_layer: int = 5
    n_ini: int = 8
    kernel_size: int = 3
    se_reduction: int = 2

    def __post_init__(self):
        if self.n_layer < 2:
            raise ConfigurationError("n_layer must be >= 2")
        if self.n_ini < 1:
            raise ConfigurationError("n_ini must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd for same-size branches")
        if self.se_reduction < 1:
            raise ConfigurationError("se_reduction must be >= 1")

    def layer_channels(self) -> list[int]:
        return [self.n_ini * (2 ** i) for i in range(self.n_layer)]


class Conv3d:
    """3D convolution layer owning its kernel and bias."""

    def __init__(self, c_in: int, c_out: int, kernel, stride: int = 1,
                 padding=0, name: str = "conv"):
        kernel = tuple(kernel) if isinstance(kernel, (tuple, list)) else (kernel,) * 3
        self.stride = stride
        self.padding = padding
        self.weight = parameter(np.zeros((c_out, c_in) + kernel), f"{name}.weight",
                                init="he", decay=True)
        self.bias = parameter(np.zeros(c_out), f"{name}.bias", init="zero", decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        yield self.weight
        yield self.bias


class BatchNorm3d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn"):
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels), f"{name}.gamma", init="one", decay=False)
        self.beta = parameter(np.zeros(channels), f"{name}.beta", init="zero", decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.momentum, self.eps)

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self._name}.running_mean", self.running_mean
        yield f"{self._name}.running_var", self.running_var


class Linear:
    def __init__(self, f_in: int, f_out: int, name: str = "fc"):
        self.weight = parameter(np.zeros((f_in, f_out)), f"{name}.weight", init="he", decay=True)
        self.bias = parameter(np.zeros(f_out), f"{name}.bias", init="zero", decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self):
        yield self.weight
        yield self.bias


class AsymmetricConvBlock:
    """Sum of four parallel same-padded convolutions: one cubic d*d*d kernel
    plus one 1-D kernel per axis."""

    def __init__(self, c_in: int, c_out: int, d: int = 3, name: str = "ac"):
        if d % 2 != 1:
            raise ConfigurationError("asymmetric conv requires an odd kernel size")
        p = d // 2
        self.branches = [
            Conv3d(c_in, c_out, (d, d, d), padding=(p, p, p), name=f"{name}.cube"),
            Conv3d(c_in, c_out, (d, 1, 1), padding=(p, 0, 0), name=f"{name}.axis_d"),
            Conv3d(c_in, c_out, (1, d, 1), padding=(0, p, 0), name=f"{name}.axis_h"),
            Conv3d(c_in, c_out, (1, 1, d), padding=(0, 0, p), name=f"{name}.axis_w"),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = ad.add(out, branch(x))
        return out

    def parameters(self):
        for branch in self.branches:
            yield from branch.parameters()


class SqueezeExcitation:
    """Channel gating: global average pool -> bottleneck FC pair -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 2, name: str = "se"):
        reduced = max(1, channels // reduction)
        self.fc1 = Linear(channels, reduced, name=f"{name}.fc1")
        self.fc2 = Linear(reduced, channels, name=f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.data.shape[:2]
        gate = ad.sigmoid(self.fc2(ad.elu(self.fc1(ad.global_avg_pool(x)))))
        return ad.mul(x, ad.reshape(gate, (n, c, 1, 1, 1)))

    def parameters(self):
        yield from self.fc1.parameters()
        yield from self.fc2.parameters()


class ScaledDenseLayer:
    """One encoder layer: pool-and-concatenate every earlier map, transform,
    gate, and downsample by 2."""

    def __init__(self, in_channels: list[int], c_out: int, config: ScaledDenseConfig,
                 name: str = "layer"):
        c_cat = sum(in_channels)
        d = config.kernel_size
        self.ac1 = AsymmetricConvBlock(c_cat, c_out, d, name=f"{name}.ac1")
        self.bn1 = BatchNorm3d(c_out, name=f"{name}.bn1")
        self.ac2 = AsymmetricConvBlock(c_out, c_out, d, name=f"{name}.ac2")
        self.bn2 = BatchNorm3d(c_out, name=f"{name}.bn2")
        self.se = SqueezeExcitation(c_out, config.se_reduction, name=f"{name}.se")

    def __call__(self, preceding: list[Tensor], training: bool) -> Tensor:
        target = preceding[-1].data.shape[2:]
        resized = []
        for x in preceding:
            extents = x.data.shape[2:]
            factor = extents[0] // target[0]
            if any(e != t * factor for e, t in zip(extents, target)) or factor < 1:
                raise ConfigurationError(
                    f"cannot pool extents {extents} down to {target} with one integer factor")
            resized.append(x if factor == 1 else ad.maxpool3d(x, window=factor, stride=factor))
        h = ad.concat_channels(resized)
        h = ad.elu(self.bn1(self.ac1(h), training))
        h = ad.elu(self.bn2(self.ac2(h), training))
        h = self.se(h)
        return ad.maxpool3d(h, window=2, stride=2)

    def parameters(self):
        yield from self.ac1.parameters()
        yield from self.bn1.parameters()
        yield from self.ac2.parameters()
        yield from self.bn2.parameters()
        yield from self.se.parameters()

    def buffers(self):
        yield from self.bn1.buffers()
        yield from self.bn2.buffers()


class ScaledDenseBlock:
    """Stack of densely connected multi-scale layers.

    Layer i consumes the input volume and every earlier layer's output, each
    max-pooled to layer i's working resolution. Input extents are zero-padded
    (centered) to the nearest multiple of 2^n_layer so every halving is exact.
    The final feature map has 2^(n_layer-1) * n_ini channels at 1/2^n_layer of
    the padded resolution.
    """

    def __init__(self, config: ScaledDenseConfig, in_channels: int = 1,
                 name: str = "backbone"):
        self.config = config
        widths = config.layer_channels()
        self.layers = []
        chans = [in_channels]
        for i, w in enumerate(widths):
            self.layers.append(ScaledDenseLayer(list(chans), w, config, name=f"{name}.layer{i}"))
            chans.append(w)
        self.out_channels = widths[-1]

    def _pad_to_multiple(self, x: Tensor) -> Tensor:
        m = 2 ** self.config.n_layer
        pads = []
        for extent in x.data.shape[2:]:
            total = (-extent) % m
            pads.append((total // 2, total - total // 2))
        if all(p == (0, 0) for p in pads):
            return x
        return ad.zero_pad3d(x, pads)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 5:
            raise ConfigurationError("backbone expects a [N,C,D,H,W] input")
        maps = [self._pad_to_multiple(x)]
        for layer in self.layers:
            maps.append(layer(maps, training))
        return maps[-1]

    def parameters(self):
        for layer in self.layers:
            yield from layer.parameters()

    def buffers(self):
        for layer in self.layers:
            yield from layer.buffers()
